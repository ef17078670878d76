#pragma once

// Checkpoint container: <dir>/manifest.json plus one raw little-endian
// float32 file per named array. The manifest lists name, shape and SHA-256
// of every array, a combined content hash, and free-form metadata.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include <json.hpp>

#include "diffmark/nn/layers.hpp"

namespace diffmark::io {

namespace fs = std::filesystem;
using nlohmann::json;

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const fs::path& p);

// Hash over names, shapes and values of every param and buffer in order.
std::string state_hash(const nn::State<float>& state);

void save_checkpoint(const fs::path& dir, const std::string& kind, const json& meta,
                     const nn::State<float>& state);

// Loads arrays into `state` (layout must match) and returns the manifest.
// Throws DependencyError when the directory or manifest is missing.
json load_checkpoint(const fs::path& dir, const std::string& kind, nn::State<float>& state);

bool checkpoint_exists(const fs::path& dir);
json read_manifest(const fs::path& dir);

void write_text(const fs::path& p, const std::string& text);
std::string read_text(const fs::path& p);

}  // namespace diffmark::io

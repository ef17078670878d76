#pragma once

// Images are float tensors (3, H, W) with values in [-1, 1].

#include <cstdint>
#include <filesystem>
#include <vector>

#include "diffmark/core/tensor.hpp"

namespace diffmark::io {

std::vector<std::uint8_t> to_rgb8(const float* chw, int h, int w);
void from_rgb8(const std::uint8_t* rgb, int h, int w, float* chw);

void write_png(const std::filesystem::path& p, const float* chw, int h, int w);
void write_png(const std::filesystem::path& p, const Tensor<float>& img);
// Grayscale PNG from an (H, W) map already scaled to [0, 1].
void write_png_gray(const std::filesystem::path& p, const float* map, int h, int w);
Tensor<float> read_png(const std::filesystem::path& p);

// Encode to JPEG at `quality` in memory and decode back.
Tensor<float> jpeg_roundtrip(const Tensor<float>& img, int quality);

}  // namespace diffmark::io

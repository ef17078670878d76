#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "diffmark/core/tensor.hpp"

namespace diffmark::lab {

inline constexpr int kNumClasses = 10;
inline constexpr int kImageSize = 32;

struct Dataset {
    Tensor<float> images;  // (N, 3, 32, 32) in [-1, 1]
    std::vector<int> labels;

    int size() const { return static_cast<int>(labels.size()); }
};

// Smooth random background plus one class-specific shape. Label i is
// assigned to image i as i mod 10 before a seeded shuffle, so the class
// histogram is exactly balanced up to n mod 10.
Dataset generate_dataset(int n, std::uint64_t seed);

// Writes <dir>/NNNNNN.png and <dir>/manifest.csv (file,label).
void save_dataset(const Dataset& d, const std::filesystem::path& dir);

// Reads a folder written by save_dataset, or any folder of 32x32 PNGs
// (label 0 when no manifest is present).
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace diffmark::lab

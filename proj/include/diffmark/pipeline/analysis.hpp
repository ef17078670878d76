#pragma once

#include <filesystem>
#include <vector>

#include "diffmark/core/tensor.hpp"

namespace diffmark::pipeline {

// L2 norm of each channel of a (C, h, w) or (1, C, h, w) perturbation.
std::vector<double> channel_l2(const Tensor<float>& delta);

// Centred log(1 + |F|^2) of an (H, W) map, DC at (H/2, W/2).
Tensor<double> log_power_spectrum(const Tensor<float>& map);
// Mean of the spectrum over integer radius rings from the centre.
std::vector<double> radial_profile(const Tensor<double>& spectrum);
struct BandSplit {
    double inside = 0.0, outside = 0.0;
};
// Mean spectrum value inside and outside the given radius.
BandSplit band_split(const Tensor<double>& spectrum, double radius);

// Channel-mean |a - b| of (3, H, W) images, amplified and clipped to [0, 1].
Tensor<float> difference_map(const Tensor<float>& a, const Tensor<float>& b, double gain);
// Channel mean of a (C, H, W) tensor.
Tensor<float> channel_mean(const Tensor<float>& x);

struct SignalReport {
    std::vector<double> l2;
    std::vector<double> radial;
    BandSplit band;
    double radius = 0.0;
};
// Analyses the latent perturbation and writes the spectrum, difference maps
// and CSVs under dir. watermarked/clean are matching (N, 3, H, W) batches.
SignalReport write_signal_report(const std::filesystem::path& dir, const Tensor<float>& delta,
                                 const Tensor<float>& watermarked, const Tensor<float>& clean, double gain);

}  // namespace diffmark::pipeline

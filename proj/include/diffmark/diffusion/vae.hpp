#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffmark/nn/layers.hpp"

namespace diffmark::diffusion {

using ag::Var;

struct VaeConfig {
    int image_channels = 3;
    int latent_channels = 4;
    int width = 32;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VaeConfig, image_channels, latent_channels, width)

// 4x downsampling convolutional VAE: (N, 3, 32, 32) in [-1, 1] <-> (N, 4, 8, 8).
// encode() returns the posterior mean times the scale factor; decode()
// divides by it and clamps to [-1, 1].
class ToyVAE {
public:
    ToyVAE() = default;
    ToyVAE(const VaeConfig& cfg, std::uint64_t seed);
    static ToyVAE identity();

    Var<float> encode(const Var<float>& x) const;
    Var<float> decode(const Var<float>& z) const;
    Tensor<float> encode(const Tensor<float>& x) const;
    Tensor<float> decode(const Tensor<float>& z) const;

    // Raw networks without scaling or clamping (training).
    struct Posterior {
        Var<float> mu, logvar;
    };
    Posterior encode_raw(const Var<float>& x) const;
    Var<float> decode_raw(const Var<float>& z) const;

    bool identity_mode() const { return identity_; }
    bool trained() const { return trained_; }
    void mark_trained(double scale_factor) {
        trained_ = true;
        scale_factor_ = scale_factor;
    }
    double scale_factor() const { return scale_factor_; }
    const VaeConfig& config() const { return cfg_; }

    void state(nn::State<float>& s, const std::string& prefix = "");
    nn::State<float> state() {
        nn::State<float> s;
        state(s);
        return s;
    }

private:
    void require_ready() const;

    VaeConfig cfg_;
    bool identity_ = false;
    bool trained_ = false;
    double scale_factor_ = 1.0;
    nn::Conv2d<float> e1_, e2_, e3_, e4_, e_mu_, e_logvar_;
    nn::Conv2d<float> d_in_, d1_, d2_, d3_, d_out_;
};

struct VaeTrainConfig {
    int epochs = 30;
    int batch = 32;
    double lr = 2e-3;
    double kl_weight = 1e-4;
    std::uint64_t seed = 1;
    // Held-out round-trip PSNR floor (dB); training fails below it.
    double psnr_floor = 20.0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VaeTrainConfig, epochs, batch, lr, kl_weight, seed, psnr_floor)

struct VaeTrainResult {
    std::vector<double> loss_trace;
    double val_psnr = 0.0;
    double scale_factor = 1.0;
};

// Trains on images (N, 3, H, W), then sets the scale factor to the reciprocal
// of the standard deviation of posterior means over the training images.
VaeTrainResult train_vae(ToyVAE& vae, const Tensor<float>& images, const VaeTrainConfig& cfg);

// PSNR for images in [-1, 1] (peak-to-peak 2). Identical inputs return the
// sentinel kPsnrCap.
inline constexpr double kPsnrCap = 100.0;
double psnr(const float* a, const float* b, std::size_t n);
double psnr(const Tensor<float>& a, const Tensor<float>& b);

}  // namespace diffmark::diffusion

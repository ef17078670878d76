#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffmark/diffusion/schedule.hpp"
#include "diffmark/nn/layers.hpp"

namespace diffmark::diffusion {

using ag::Var;

struct DenoiserConfig {
    int latent_channels = 4;
    int base = 32;
    int mid = 64;
    int emb_dim = 128;
    int time_freq_dim = 64;
    int num_classes = 10;
    // Adds a zero-initialized guidance-scale embedding (consistency student).
    bool guidance_embedding = false;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DenoiserConfig, latent_channels, base, mid, emb_dim, time_freq_dim,
                                                num_classes, guidance_embedding)

template <typename T>
struct ResBlock {
    nn::Conv2d<T> c1, c2, skip;
    nn::Linear<T> emb;
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(Rng& rng, int cin, int cout, int emb_dim);
    Var<T> operator()(const Var<T>& x, const Var<T>& emb_act) const;
    void state(nn::State<T>& s, const std::string& p);
};

// Small conditional UNet predicting epsilon for (N, C, H, W) latents with H, W
// divisible by 4. Label `num_classes` is the null (unconditional) label.
template <typename T>
class ToyDenoiser {
public:
    ToyDenoiser() = default;
    ToyDenoiser(const DenoiserConfig& cfg, std::uint64_t seed);
    ToyDenoiser(ToyDenoiser&&) noexcept = default;
    ToyDenoiser& operator=(ToyDenoiser&&) noexcept = default;

    Var<T> operator()(const Var<T>& z, const std::vector<double>& t, const std::vector<int>& labels,
                      const std::vector<double>* omega = nullptr) const;

    int null_label() const { return cfg_.num_classes; }
    const DenoiserConfig& config() const { return cfg_; }

    void state(nn::State<T>& s, const std::string& prefix = "");
    nn::State<T> state() {
        nn::State<T> s;
        state(s);
        return s;
    }

    // Independent deep copy (Vars share storage on plain copy, so copying is
    // only available through this).
    ToyDenoiser clone() const;
    template <typename U>
    ToyDenoiser<U> cast() const;

    long evaluations() const { return evals_ ? evals_->load() : 0; }
    void reset_evaluations() const {
        if (evals_) evals_->store(0);
    }

private:
    DenoiserConfig cfg_;
    nn::Linear<T> t_fc1_, t_fc2_, g_fc1_, g_fc2_;
    Var<T> label_table_;
    nn::Conv2d<T> conv_in_, down1_, down2_, conv_out_;
    ResBlock<T> rb1_, rb2_, mid_, up1_, up2_;
    std::unique_ptr<std::atomic<long>> evals_ = std::make_unique<std::atomic<long>>(0);
};

extern template class ToyDenoiser<float>;
extern template class ToyDenoiser<double>;

// Guidance convention: (1 + w) eps_cond - w eps_uncond.
enum class CfgConvention { guided_affine };
std::string to_string(CfgConvention c);

struct CfgConfig {
    double w = 2.0;
    CfgConvention convention = CfgConvention::guided_affine;
};

// Combined guided prediction; cond and uncond passes share one batched call.
Tensor<float> cfg_predict(const ToyDenoiser<float>& den, const Tensor<float>& z_t, int t, const std::vector<int>& labels,
                          const CfgConfig& cfg);

// DDIM sampling with optional persistent delta injection. `delta` is either
// one latent broadcast over the batch or one latent per sample.
Tensor<float> ddim_sample(const ToyDenoiser<float>& den, const NoiseSchedule& sched, int steps,
                          const std::vector<int>& labels, const CfgConfig& cfg, const Tensor<float>& z_T,
                          const Tensor<float>* delta = nullptr, double injection_scale = 1.0);

// Adds scale * delta to z (delta broadcast when it has batch size 1).
void inject(Tensor<float>& z, const Tensor<float>& delta, double scale);

struct DenoiserTrainConfig {
    int epochs = 40;
    int batch = 64;
    double lr = 2e-3;
    double cond_dropout = 0.1;
    double val_fraction = 0.1;
    // Validation epsilon-MSE must fall below this or training fails.
    double mse_threshold = 0.6;
    std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DenoiserTrainConfig, epochs, batch, lr, cond_dropout, val_fraction,
                                                mse_threshold, seed)

struct DenoiserTrainResult {
    std::vector<double> loss_trace;
    double val_mse = 0.0;
};

// Standard epsilon-prediction objective with label dropout for guidance.
// `latents` is (N, C, H, W); the model is updated in place.
DenoiserTrainResult train_toy_denoiser(ToyDenoiser<float>& model, const Tensor<float>& latents,
                                       const std::vector<int>& labels, const NoiseSchedule& sched,
                                       const DenoiserTrainConfig& cfg);

// Mean epsilon-MSE over the given latents at timesteps drawn from `seed`.
double denoiser_mse(const ToyDenoiser<float>& model, const Tensor<float>& latents, const std::vector<int>& labels,
                    const NoiseSchedule& sched, std::uint64_t seed);

// Selects rows of a (N, ...) tensor.
Tensor<float> gather_rows(const Tensor<float>& x, const std::vector<int>& idx);
Tensor<float> slice_batch(const Tensor<float>& x, int start, int count);

}  // namespace diffmark::diffusion

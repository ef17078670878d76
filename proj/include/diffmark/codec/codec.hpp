#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffmark/nn/optim.hpp"

namespace diffmark::codec {

using ag::Var;

// L-bit secret with entries in {0, 1}.
struct Secret {
    std::vector<int> bits;

    Secret() = default;
    explicit Secret(std::vector<int> b);
    int size() const { return static_cast<int>(bits.size()); }
    static Secret random(int L, Rng& rng);
    // Parses a string of '0'/'1' characters.
    static Secret parse(const std::string& s);
    std::string str() const;
    bool operator==(const Secret&) const = default;
};

int hamming(const Secret& a, const Secret& b);

struct CodecConfig {
    int bits = 16;
    int embed_dim = 64;
    int latent_channels = 4;
    int latent_size = 8;
    double alpha_init = 0.1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CodecConfig, bits, embed_dim, latent_channels, latent_size, alpha_init)

template <typename T>
struct Perturbation {
    Var<T> delta, mu, log_var;
};

// Secret -> latent perturbation. Bit embeddings are summed, modulate the
// spatial basis, pass three 3x3 refinement convs (no BN after the last) and
// two 3x3 heads for mean and log-variance. alpha = exp(log_alpha) > 0.
template <typename T>
class Encoder {
public:
    Encoder() = default;
    Encoder(const CodecConfig& cfg, std::uint64_t seed);
    Encoder(Encoder&&) noexcept = default;
    Encoder& operator=(Encoder&&) noexcept = default;

    // `rng` is used only when sample is true. `training` selects batch
    // statistics in the normalization layers.
    Perturbation<T> operator()(const std::vector<Secret>& secrets, bool sample, Rng* rng, bool training);
    // Mean perturbation for one secret with running statistics, (1, C, h, w).
    Tensor<float> delta(const Secret& s);

    Var<T> alpha() const { return ag::exp(log_alpha_); }
    const CodecConfig& config() const { return cfg_; }
    void state(nn::State<T>& s, const std::string& prefix = "");
    nn::State<T> state() {
        nn::State<T> s;
        state(s);
        return s;
    }
    template <typename U>
    Encoder<U> cast() const;

    Var<T>& embeddings() { return table_; }
    Var<T>& basis() { return basis_; }

private:
    CodecConfig cfg_;
    Var<T> table_, basis_, log_alpha_;
    nn::Conv2d<T> r1_, r2_, r3_, head_mu_, head_lv_;
    nn::BatchNorm<T> bn1_, bn2_;
};

// Latent -> (N, L, 2) per-bit logits. 3x3 input conv, log2(h) - 1 strided
// 4x4 blocks doubling channels (no BN on the last), then a 3-layer MLP.
template <typename T>
class Decoder {
public:
    Decoder() = default;
    Decoder(const CodecConfig& cfg, std::uint64_t seed);
    Decoder(Decoder&&) noexcept = default;
    Decoder& operator=(Decoder&&) noexcept = default;

    Var<T> operator()(const Var<T>& z, bool training);
    // Hard decisions with running statistics.
    std::vector<Secret> decode(const Tensor<float>& z);
    // Latents passed through the network so far (one per image per forward).
    long images_decoded() const { return decoded_ ? decoded_->load() : 0; }

    const CodecConfig& config() const { return cfg_; }
    void state(nn::State<T>& s, const std::string& prefix = "");
    nn::State<T> state() {
        nn::State<T> s;
        state(s);
        return s;
    }
    template <typename U>
    Decoder<U> cast() const;

private:
    CodecConfig cfg_;
    nn::Conv2d<T> conv_in_;
    std::vector<nn::Conv2d<T>> down_;
    std::vector<nn::BatchNorm<T>> bn_;
    nn::Linear<T> fc1_, fc2_, fc3_;
    std::unique_ptr<std::atomic<long>> decoded_ = std::make_unique<std::atomic<long>>(0);
};

extern template class Encoder<float>;
extern template class Encoder<double>;
extern template class Decoder<float>;
extern template class Decoder<double>;

// Per-bit hard decision from (N, L, 2) logits.
std::vector<Secret> hard_decision(const Tensor<float>& logits);
// Fraction of matching bits over the batch.
double bit_accuracy(const Tensor<float>& logits, const std::vector<Secret>& secrets);

// Mean per-bit cross-entropy over the batch.
template <typename T>
Var<T> ce_loss(const Var<T>& logits, const std::vector<Secret>& secrets);
// Mean pairwise cosine similarity of the batch's perturbations (B >= 2).
template <typename T>
Var<T> orth_loss(const Var<T>& deltas);
// Mean over the batch of (std(delta_b) - sigma_target)^2.
template <typename T>
Var<T> mag_loss(const Var<T>& deltas, double sigma_target);
// Gaussian KL to the standard normal, mean over elements.
template <typename T>
Var<T> kl_loss(const Var<T>& mu, const Var<T>& log_var);

struct PretrainConfig {
    long max_steps = 50000;
    int batch = 64;
    double lr_encoder = 3e-4;
    double lr_decoder = 1e-4;
    double sigma_start = 0.0;
    double sigma_end = 0.3;
    double w_clean = 1.0;
    double w_noisy = 1.0;
    double w_orth = 0.1;
    double stop_accuracy = 0.99;
    int stop_patience = 10;
    std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, max_steps, batch, lr_encoder, lr_decoder, sigma_start,
                                                sigma_end, w_clean, w_noisy, w_orth, stop_accuracy, stop_patience,
                                                seed)

struct PretrainResult {
    long steps = 0;
    bool converged = false;
    double clean_accuracy = 0.0;
    double noisy_accuracy = 0.0;
    std::vector<double> loss_trace;
};

// Joint encoder/decoder pretraining on perturbations alone. Stops once clean
// accuracy reaches stop_accuracy for stop_patience consecutive steps;
// otherwise returns with converged = false after max_steps.
PretrainResult pretrain(Encoder<float>& enc, Decoder<float>& dec, const PretrainConfig& cfg);

// Mean absolute pairwise cosine similarity of mean perturbations.
double mean_abs_cosine(Encoder<float>& enc, const std::vector<Secret>& secrets);

}  // namespace diffmark::codec

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diffmark/attacks/attacks.hpp"
#include "diffmark/codec/codec.hpp"
#include "diffmark/ident/identify.hpp"
#include "diffmark/training/trainer.hpp"

namespace diffmark::pipeline {

using codec::Secret;

struct EmbedConfig {
    int ddim_steps = 10;
    double guidance = 2.0;
    // Inference default: full delta before every denoiser evaluation.
    training::InjectionScale injection = training::InjectionScale::full;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EmbedConfig, ddim_steps, guidance, injection)

// One image request: z_T is drawn from `seed` alone, so the same seed gives
// the same clean trajectory whatever the secret.
struct EmbedRequest {
    Secret secret;
    int label = 0;
    std::uint64_t seed = 0;
};

struct Embedded {
    Tensor<float> images;   // (N, 3, H, W) in [-1, 1]
    Tensor<float> latents;  // z0 before decoding
};

Tensor<float> initial_noise(const std::vector<EmbedRequest>& reqs, const codec::CodecConfig& geometry);

Embedded embed(const std::vector<EmbedRequest>& reqs, codec::Encoder<float>& enc,
               const diffusion::ToyDenoiser<float>& den, const diffusion::ToyVAE& vae, const EmbedConfig& cfg);
// Same requests with no perturbation.
Embedded generate_clean(const std::vector<EmbedRequest>& reqs, const diffusion::ToyDenoiser<float>& den,
                        const diffusion::ToyVAE& vae, const codec::CodecConfig& geometry, const EmbedConfig& cfg);

struct Detection {
    Secret secret;
    int matches = -1;                 // against the registered key when given
    std::optional<bool> decision;     // matches > tau when a threshold and key are given
};

// VAE encode then one decoder pass; no diffusion model is involved.
std::vector<Detection> detect(const Tensor<float>& images, codec::Decoder<float>& dec, const diffusion::ToyVAE& vae,
                              const std::optional<ident::DetectionThreshold>& threshold = {},
                              const std::vector<Secret>& registered = {});
std::vector<Secret> detect_latents(const Tensor<float>& latents, codec::Decoder<float>& dec);

// Per-image BER of decoded secrets against the truth.
std::vector<double> per_image_ber(const std::vector<Secret>& decoded, const std::vector<Secret>& truth);
double mean(const std::vector<double>& v);

// Bit accuracy of embed -> detect, from the latent and through the image,
// plus the BER of the same requests generated without a watermark.
struct RoundTrip {
    double latent_bit_acc = 0.0;
    double image_bit_acc = 0.0;
    double clean_ber = 0.0;
};
RoundTrip round_trip(const std::vector<EmbedRequest>& reqs, codec::Encoder<float>& enc, codec::Decoder<float>& dec,
                     const diffusion::ToyDenoiser<float>& den, const diffusion::ToyVAE& vae, const EmbedConfig& cfg);

// Attack sweep over embedded images.
struct SweepRow {
    attacks::AttackKind kind;
    double strength = 0.0;
    std::vector<double> ber;  // per image
    double mean_ber = 0.0;
    double bit_acc = 0.0;
    double psnr = 0.0;        // attacked vs unattacked watermarked images
    double tpr = 0.0;         // detection rate at the configured FPR
};
std::vector<SweepRow> attack_sweep(const Tensor<float>& watermarked, const std::vector<Secret>& secrets,
                                   codec::Decoder<float>& dec, const diffusion::ToyVAE& vae,
                                   const attacks::AttackContext& ctx, const std::vector<attacks::AttackKind>& kinds,
                                   int levels, double fpr, std::uint64_t seed);
std::string sweep_csv_header();
std::string sweep_csv_row(const SweepRow& r, const std::string& config_hash);

// Spearman rank correlation with average ranks for ties; 0 when either side
// is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);
struct Interval {
    double estimate = 0.0, lo = 0.0, hi = 0.0;
};
// Correlation between strength and mean BER per level, with a percentile
// bootstrap over images. rows must share one kind, ordered by level.
Interval spearman_bootstrap(const std::vector<SweepRow>& rows, int resamples, double level, std::uint64_t seed);

// Cross-model evaluation: same codec, different frozen denoisers sharing the VAE.
struct TransferTarget {
    std::string name;
    const diffusion::ToyDenoiser<float>* denoiser = nullptr;
};
struct TransferRow {
    std::string model;
    double bit_acc = 0.0;
    double latent_bit_acc = 0.0;
    std::vector<std::pair<attacks::AttackKind, double>> attack_tpr;
};
std::vector<TransferRow> transfer_eval(codec::Encoder<float>& enc, codec::Decoder<float>& dec,
                                       const diffusion::ToyVAE& vae, const std::vector<TransferTarget>& targets,
                                       const std::vector<EmbedRequest>& reqs, const EmbedConfig& cfg,
                                       const std::vector<attacks::AttackSpec>& attacks, const attacks::AttackContext& ctx,
                                       double fpr);

struct Latency {
    std::size_t images = 0;
    double mean_ms = 0.0, median_ms = 0.0, p95_ms = 0.0;
};
// Batch-1 wall clock of VAE encode plus decoder, after `warmup` untimed runs.
Latency latency_bench(codec::Decoder<float>& dec, const diffusion::ToyVAE& vae, const Tensor<float>& images,
                      int warmup = 10);

}  // namespace diffmark::pipeline

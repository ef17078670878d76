#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffmark/codec/codec.hpp"
#include "diffmark/diffusion/vae.hpp"
#include "diffmark/lcm/consistency.hpp"

namespace diffmark::training {

using ag::Var;
using codec::Secret;

// How delta is scaled at each of N DDIM steps.
enum class InjectionScale { full, one_over_N };
NLOHMANN_JSON_SERIALIZE_ENUM(InjectionScale, {{InjectionScale::full, "full"}, {InjectionScale::one_over_N, "one_over_N"}})
std::string to_string(InjectionScale s);
double injection_factor(InjectionScale s, int steps);

struct LossWeights {
    double lcm = 1.0;
    double ddim = 1.0;
    double mag = 5.0;
    double lafid = 0.1;
    double prvl = 1.5;
    double freq = 0.5;
    double neg = 0.01;
    double regen = 1.0;
    // Used by codec pretraining only; kept here so one table holds every weight.
    double orth = 0.1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, lcm, ddim, mag, lafid, prvl, freq, neg, regen, orth)

// Reconstruction group {lcm, ddim, mag, kl} opens at tau_rec; imperceptibility
// group {lafid, prvl, freq, neg, regen} opens at tau_imp.
struct CurriculumConfig {
    long tau_rec = 0;
    long tau_imp = 500;
    double sigma_start = 0.10;
    double sigma_end = 0.05;
    // Annealing horizon; <= 0 means half the run.
    long anneal_steps = -1;
    double beta_start = 0.001;
    double beta_end = 0.05;
    long beta_warmup = 1000;
    LossWeights weights;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CurriculumConfig, tau_rec, tau_imp, sigma_start, sigma_end,
                                                anneal_steps, beta_start, beta_end, beta_warmup, weights)

struct TrainConfig {
    long steps = 4000;
    int batch = 8;
    int ddim_steps = 10;
    int lcm_steps = 4;
    double guidance = 2.0;
    double lr_encoder = 5e-5;
    double lr_decoder = 3e-4;
    // <= 0 means 5% of the run (500 of 10,000 scaled).
    long warmup = -1;
    double lr_floor = 1e-6;
    double clip_encoder = 5.0;
    double clip_decoder = 1.0;
    InjectionScale train_injection = InjectionScale::one_over_N;
    // Low-frequency disk radius in latent pixels; <= 0 scales 10 at 64x64.
    double freq_radius = -1;
    int prvl_kernel = 32;
    CurriculumConfig curriculum;
    std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, steps, batch, ddim_steps, lcm_steps, guidance, lr_encoder,
                                                lr_decoder, warmup, lr_floor, clip_encoder, clip_decoder,
                                                train_injection, freq_radius, prvl_kernel, curriculum, seed)

// Validates the strict gate order and annealing bounds.
void validate(const TrainConfig& cfg);
long anneal_horizon(const TrainConfig& cfg);
long warmup_steps(const TrainConfig& cfg);

double anneal_sigma_target(long t, double sigma_s, double sigma_e, long horizon);
double kl_beta(long t, const CurriculumConfig& c);
// g_i(t) for a loss term name.
bool gate_open(const std::string& term, long t, const CurriculumConfig& c);
bool in_imperceptibility_group(const std::string& term);

// Losses. Images are (N, 3, H, W), latents (N, C, h, w).
template <typename T>
Var<T> lafid_loss(const Var<T>& z0_lcm, const Var<T>& z0_lcm_clean);
template <typename T>
Var<T> prvl_loss(const Var<T>& x_wm, const Var<T>& x_clean, int kernel);
// Per sample: mean power inside the centred disk over (mean total power + 1e-8);
// averaged over the batch.
template <typename T>
Var<T> freq_loss(const Var<T>& delta, double radius);
// Lattice points of an h x w grid within `radius` of the centred DC bin,
// as a mask in unshifted FFT layout.
Tensor<float> low_frequency_mask(int h, int w, double radius);
template <typename T>
Var<T> neg_entropy_loss(const Var<T>& logits);

struct StepReport {
    long step = 0;
    std::map<std::string, double> losses;
    double total = 0.0;
    double std_delta = 0.0;
    double sigma_target = 0.0;
    double bit_acc_lcm = 0.0;
    double bit_acc_ddim = 0.0;
    // NaN when the clean branch was not evaluated this step.
    double clean_ber = 0.0;
};

// Frozen models for one training run. The trainer clears requires_grad on
// every frozen parameter.
struct FrozenModels {
    const diffusion::ToyDenoiser<float>* denoiser = nullptr;
    const lcm::ConsistencyModel<float>* lcm = nullptr;
    const diffusion::ToyVAE* vae = nullptr;
    diffusion::NoiseSchedule schedule;
};

class Trainer {
public:
    Trainer(codec::Encoder<float>& enc, codec::Decoder<float>& dec, FrozenModels models, TrainConfig cfg);

    StepReport step();
    long current_step() const { return step_; }
    const TrainConfig& config() const { return cfg_; }

    // Encoder, decoder and optimizer moments plus the step counter.
    void save(const std::filesystem::path& dir);
    void load(const std::filesystem::path& dir);

    // Counts decoder-path gradient reaching the encoder from the DDIM loss
    // alone (must be exactly zero).
    double ddim_encoder_grad_norm();

    // Hook for tests: called with the assembled total loss before backward.
    std::function<void(const std::map<std::string, Var<float>>&)> on_losses;

private:
    nn::State<float> optimizer_state();

    codec::Encoder<float>& enc_;
    codec::Decoder<float>& dec_;
    FrozenModels m_;
    TrainConfig cfg_;
    nn::State<float> enc_state_, dec_state_;
    nn::AdamW opt_enc_, opt_dec_;
    long step_ = 0;
};

struct RunResult {
    std::vector<StepReport> history;
};

// Full loop with metric CSV emission (`csv` may be empty) and periodic
// checkpoints every `checkpoint_every` steps into `checkpoint_dir` when set.
// `stop` may end the run early.
RunResult run_training(Trainer& trainer, const std::filesystem::path& csv, const std::string& config_hash,
                       long checkpoint_every = 0, const std::filesystem::path& checkpoint_dir = {},
                       const std::function<bool(const StepReport&)>& stop = {});

std::string csv_header();
std::string csv_row(const StepReport& r, const std::string& config_hash);

// Collapse experiment: trains until std(delta) < collapse_fraction * sigma_s
// (collapsed) or the moving-average DDIM bit accuracy exceeds acc_threshold.
struct CollapseOutcome {
    bool collapsed = false;
    bool learned = false;
    long steps = 0;
    double final_std = 0.0;
    double final_acc = 0.0;
};
CollapseOutcome collapse_probe(Trainer& trainer, long max_steps, double collapse_fraction = 0.1,
                               double acc_threshold = 0.75, int window = 20);

}  // namespace diffmark::training

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffmark/diffusion/denoiser.hpp"
#include "diffmark/diffusion/vae.hpp"

namespace diffmark::attacks {

using ag::Var;

enum class AttackKind {
    rotation,
    rcrop,
    erase,
    bright,
    contrast,
    blur,
    noise,
    jpeg,
    regen_vae,
    regen_diff,
    rinse_2xdiff,
    adv_klvae,
    adv_rn_surrogate
};
NLOHMANN_JSON_SERIALIZE_ENUM(AttackKind, {{AttackKind::rotation, "rotation"},
                                          {AttackKind::rcrop, "rcrop"},
                                          {AttackKind::erase, "erase"},
                                          {AttackKind::bright, "bright"},
                                          {AttackKind::contrast, "contrast"},
                                          {AttackKind::blur, "blur"},
                                          {AttackKind::noise, "noise"},
                                          {AttackKind::jpeg, "jpeg"},
                                          {AttackKind::regen_vae, "regen_vae"},
                                          {AttackKind::regen_diff, "regen_diff"},
                                          {AttackKind::rinse_2xdiff, "rinse_2xdiff"},
                                          {AttackKind::adv_klvae, "adv_klvae"},
                                          {AttackKind::adv_rn_surrogate, "adv_rn_surrogate"}})

const std::vector<AttackKind>& all_kinds();
std::string to_string(AttackKind k);
AttackKind parse_kind(const std::string& s);

enum class Category { geometric, photometric, degradation, regeneration, adversarial };
Category category(AttackKind k);
std::string to_string(Category c);

// Strength units: rotation degrees, crop area scale, erased area fraction,
// brightness/contrast factor, blur kernel size, noise sigma in [0, 1] pixel
// units, JPEG quality, regen_vae quality level, diffusion steps t*, and
// adversarial epsilon in 1/255 units.
struct StrengthRange {
    double benign = 0.0;
    double strongest = 0.0;
    // The benign end returns the input unchanged.
    bool identity_at_benign = false;
    // Values accepted beyond the sweep range (towards benign), e.g. t* = 0.
    double accept_lo = 0.0, accept_hi = 0.0;
};
StrengthRange strength_range(AttackKind k);
// n evenly spaced strengths from benign to strongest.
std::vector<double> sweep_strengths(AttackKind k, int n);

struct AttackSpec {
    AttackKind kind = AttackKind::rotation;
    double strength = 0.0;
    std::uint64_t seed = 0;
};

// Black-box stand-in: a 4-layer conv classifier whose pooled penultimate
// features are the adversarial target.
class Surrogate {
public:
    Surrogate() = default;
    Surrogate(int classes, std::uint64_t seed);

    Var<float> features(const Var<float>& x) const;
    Var<float> logits(const Var<float>& x) const;
    nn::State<float> state();

private:
    nn::Conv2d<float> c1_, c2_, c3_, c4_;
    nn::Linear<float> head_;
};

struct SurrogateTrainConfig {
    int epochs = 4;
    int batch = 64;
    double lr = 2e-3;
    std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SurrogateTrainConfig, epochs, batch, lr, seed)
// Returns held-out accuracy on the last tenth of the data.
double train_surrogate(Surrogate& model, const Tensor<float>& images, const std::vector<int>& labels,
                       const SurrogateTrainConfig& cfg);

// Frozen models reachable by the attacks that need them.
struct AttackContext {
    const diffusion::ToyVAE* vae = nullptr;
    const diffusion::ToyDenoiser<float>* denoiser = nullptr;
    diffusion::NoiseSchedule schedule = diffusion::NoiseSchedule::linear();
    const Surrogate* surrogate = nullptr;
};

// Images are (N, 3, H, W) in [-1, 1]; output has the same shape and range.
void check_strength(const AttackSpec& spec);
Tensor<float> apply_distortion(const Tensor<float>& x, const AttackSpec& spec);
Tensor<float> apply_regeneration(const Tensor<float>& x, const AttackSpec& spec, const AttackContext& ctx);
Tensor<float> apply_adversarial(const Tensor<float>& x, const AttackSpec& spec, const AttackContext& ctx);
// Dispatches on the kind's category.
Tensor<float> apply(const Tensor<float>& x, const AttackSpec& spec, const AttackContext& ctx);

// Projected gradient ascent on ||f(x_adv) - f(x)||_2 inside the l_inf ball of
// radius eps (in [-1, 1] units): random start, `iters` signed steps of eps/10.
using FeatureFn = std::function<Var<float>(const Var<float>&)>;
Tensor<float> pgd_linf(const Tensor<float>& x, double eps, const FeatureFn& feature, int iters, std::uint64_t seed);

// Latent-space or feature-space l2 divergence per image, for reporting.
std::vector<double> feature_divergence(const Tensor<float>& a, const Tensor<float>& b, AttackKind adv,
                                       const AttackContext& ctx);

}  // namespace diffmark::attacks

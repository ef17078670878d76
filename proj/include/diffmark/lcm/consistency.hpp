#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffmark/diffusion/denoiser.hpp"
#include "diffmark/nn/optim.hpp"

namespace diffmark::lcm {

using ag::Var;
using diffusion::NoiseSchedule;
using diffusion::ToyDenoiser;

// f(z, t) = c_skip(t) z + c_out(t) x0_hat(z, t), with x0_hat the clean latent
// implied by the backbone's epsilon prediction.
struct Parameterization {
    double sigma_data = 0.5;
    double timestep_scaling = 10.0;
    int t_min = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Parameterization, sigma_data, timestep_scaling, t_min)

double c_skip(int t, const Parameterization& p);
double c_out(int t, const Parameterization& p);

enum class DistanceMetric { l2, huber };
NLOHMANN_JSON_SERIALIZE_ENUM(DistanceMetric, {{DistanceMetric::l2, "l2"}, {DistanceMetric::huber, "huber"}})

struct DistillConfig {
    int k = 20;
    double omega_min = 2.0;
    double omega_max = 2.0;
    DistanceMetric metric = DistanceMetric::l2;
    int steps = 2000;
    int batch = 32;
    double lr = 2e-4;
    double ema_rate = 0.95;
    // Pseudo-Huber width.
    double huber_c = 1e-3;
    std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DistillConfig, k, omega_min, omega_max, metric, steps, batch, lr,
                                                ema_rate, huber_c, seed)

// Distillation grid T-1, T-1-k, ... (descending, all >= 0).
std::vector<int> distill_grid(int T, int k);
// K sampling timesteps evenly spaced on the distillation grid.
std::vector<int> lcm_timesteps(int T, int k, int K);

// Student backbone (guidance-embedded copy of the teacher) plus its EMA
// target. Only the distillation loop writes the EMA weights.
template <typename T>
class ConsistencyModel {
public:
    ConsistencyModel() = default;
    // Student and EMA both start from the teacher's weights; the guidance
    // embedding starts at zero so the initial student equals the teacher.
    ConsistencyModel(const ToyDenoiser<float>& teacher, const Parameterization& param, int k, double omega);
    ConsistencyModel(ConsistencyModel&&) noexcept = default;
    ConsistencyModel& operator=(ConsistencyModel&&) noexcept = default;

    const ToyDenoiser<T>& student() const { return student_; }
    ToyDenoiser<T>& student() { return student_; }
    const ToyDenoiser<T>& ema() const { return ema_; }
    ToyDenoiser<T>& ema() { return ema_; }

    const Parameterization& param() const { return param_; }
    int k() const { return k_; }
    double omega() const { return omega_; }
    void set_omega(double w) { omega_ = w; }

    // student.* then ema.*
    void state(nn::State<T>& s);
    nn::State<T> state() {
        nn::State<T> s;
        state(s);
        return s;
    }

    template <typename U>
    ConsistencyModel<U> cast() const;

private:
    template <typename U>
    friend class ConsistencyModel;

    ToyDenoiser<T> student_, ema_;
    Parameterization param_;
    int k_ = 20;
    double omega_ = 2.0;
};

extern template class ConsistencyModel<float>;
extern template class ConsistencyModel<double>;

// One consistency-function evaluation with a per-sample timestep.
template <typename T>
Var<T> consistency_forward(const ToyDenoiser<T>& net, const NoiseSchedule& sched, const Parameterization& p,
                           const Var<T>& z_t, const std::vector<int>& t, const std::vector<double>& omega,
                           const std::vector<int>& labels);

// K-step sampling with delta injected before every evaluation. Between steps
// the estimate is moved to the next timestep along the implied epsilon, so
// the chain is deterministic and differentiable end to end. `delta` may be
// undefined (clean chain); otherwise it has batch 1 (broadcast) or matches z_T.
template <typename T>
Var<T> lcm_sample_differentiable(const ConsistencyModel<T>& model, const NoiseSchedule& sched, int K,
                                 const Var<T>& z_T, const Var<T>& delta, const std::vector<int>& labels);

// d(pred, target) under the configured metric (mean over elements).
Var<float> consistency_distance(const Var<float>& pred, const Var<float>& target, DistanceMetric m, double huber_c);

struct DistillStepResult {
    double loss = 0.0;
    double grad_norm = 0.0;
};

// One latent consistency distillation update: teacher DDIM step
// over the k-gap with CFG scale omega, EMA target at the earlier time,
// gradient step on the student, then EMA update.
DistillStepResult lcd_train_step(ConsistencyModel<float>& model, const ToyDenoiser<float>& teacher,
                                 const NoiseSchedule& sched, const DistillConfig& cfg, nn::AdamW& opt, double lr,
                                 const Tensor<float>& z0, const std::vector<int>& labels, Rng& rng);

struct DistillResult {
    std::vector<double> loss_trace;
};

// Full loop over `latents` (N, C, H, W). Student/EMA are updated in place.
DistillResult distill(ConsistencyModel<float>& model, const ToyDenoiser<float>& teacher, const NoiseSchedule& sched,
                      const Tensor<float>& latents, const std::vector<int>& labels, const DistillConfig& cfg);

// RMS distance between the student's f(z_t, t) and the clean end of the
// teacher's k-gap DDIM trajectory, averaged over grid points and samples.
double self_consistency_error(const ConsistencyModel<float>& model, const ToyDenoiser<float>& teacher,
                              const NoiseSchedule& sched, const Tensor<float>& z_T, const std::vector<int>& labels);

}  // namespace diffmark::lcm

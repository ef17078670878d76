#pragma once

#include <string>
#include <vector>

#include "diffmark/core/ops.hpp"

namespace diffmark::diffusion {

enum class BetaScheduleKind { linear };

// Timestep index used for the clean end of a trajectory (alpha_bar = 1).
inline constexpr int kTerminal = -1;

struct NoiseSchedule {
    int T = 0;
    std::vector<double> alpha_bar;
    BetaScheduleKind kind = BetaScheduleKind::linear;

    static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);

    // alpha_bar at t; kTerminal maps to 1.
    double ab(int t) const;
    void check(int t) const;
};

std::string to_string(BetaScheduleKind k);

// sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.
Tensor<float> forward_diffuse(const Tensor<float>& z0, int t, const Tensor<float>& eps, const NoiseSchedule& s);

// Deterministic DDIM update from t to t_prev (t_prev may be kTerminal).
// z_prev = c_z z_t + c_eps eps_hat.
struct DdimCoeffs {
    double c_z;
    double c_eps;
};
DdimCoeffs ddim_coeffs(int t, int t_prev, const NoiseSchedule& s);

Tensor<float> ddim_step(const Tensor<float>& z_t, const Tensor<float>& eps_hat, int t, int t_prev,
                        const NoiseSchedule& s);

template <typename T>
ag::Var<T> ddim_step(const ag::Var<T>& z_t, const ag::Var<T>& eps_hat, int t, int t_prev, const NoiseSchedule& s) {
    const DdimCoeffs c = ddim_coeffs(t, t_prev, s);
    return ag::add(ag::scale(z_t, static_cast<T>(c.c_z)), ag::scale(eps_hat, static_cast<T>(c.c_eps)));
}

// x0 estimate implied by an epsilon prediction at t.
template <typename T>
ag::Var<T> predict_x0(const ag::Var<T>& z_t, const ag::Var<T>& eps_hat, int t, const NoiseSchedule& s) {
    return ddim_step(z_t, eps_hat, t, kTerminal, s);
}

// N evaluation timesteps, evenly spaced and decreasing from T-1.
std::vector<int> ddim_timesteps(int T, int N);

}  // namespace diffmark::diffusion

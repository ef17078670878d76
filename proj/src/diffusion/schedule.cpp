#include "diffmark/diffusion/schedule.hpp"

#include <cmath>

namespace diffmark::diffusion {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    if (T < 1) throw RangeError("noise schedule needs T >= 1");
    NoiseSchedule s;
    s.T = T;
    s.kind = BetaScheduleKind::linear;
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double beta = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (T - 1);
        prod *= 1.0 - beta;
        s.alpha_bar[t] = prod;
    }
    return s;
}

void NoiseSchedule::check(int t) const {
    if (t < 0 || t >= T) throw RangeError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
}

double NoiseSchedule::ab(int t) const {
    if (t == kTerminal) return 1.0;
    check(t);
    return alpha_bar[t];
}

std::string to_string(BetaScheduleKind k) {
    switch (k) {
        case BetaScheduleKind::linear:
            return "linear";
    }
    return "unknown";
}

Tensor<float> forward_diffuse(const Tensor<float>& z0, int t, const Tensor<float>& eps, const NoiseSchedule& s) {
    s.check(t);
    if (z0.shape != eps.shape) throw ShapeError("forward_diffuse: eps shape " + shape_str(eps.shape) + " vs " + shape_str(z0.shape));
    const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
    Tensor<float> out(z0.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(a * z0[i] + b * eps[i]);
    return out;
}

DdimCoeffs ddim_coeffs(int t, int t_prev, const NoiseSchedule& s) {
    const double ab_t = s.ab(t);
    const double ab_p = s.ab(t_prev);
    if (ab_t <= 0.0) throw NumericError("ddim_step: alpha_bar_t is zero");
    const double r = std::sqrt(ab_p / ab_t);
    return {r, std::sqrt(1.0 - ab_p) - r * std::sqrt(1.0 - ab_t)};
}

Tensor<float> ddim_step(const Tensor<float>& z_t, const Tensor<float>& eps_hat, int t, int t_prev,
                        const NoiseSchedule& s) {
    if (z_t.shape != eps_hat.shape) throw ShapeError("ddim_step: shape mismatch");
    const DdimCoeffs c = ddim_coeffs(t, t_prev, s);
    Tensor<float> out(z_t.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(c.c_z * z_t[i] + c.c_eps * eps_hat[i]);
    return out;
}

std::vector<int> ddim_timesteps(int T, int N) {
    if (N < 1 || N > T) throw RangeError("ddim step count must be in [1, T]");
    std::vector<int> ts(N);
    for (int i = 0; i < N; ++i) ts[i] = (T - 1) - static_cast<int>(static_cast<long>(i) * T / N);
    return ts;
}

}  // namespace diffmark::diffusion

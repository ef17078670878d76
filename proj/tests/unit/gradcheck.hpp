#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "diffmark/core/ops.hpp"
#include "diffmark/core/rng.hpp"

namespace testutil {

using diffmark::ag::Var;

struct GradCheck {
    double rel_error = 0.0;
    double analytic_norm = 0.0;
    int checked = 0;
};

// Compares reverse-mode gradients of `loss(inputs)` with central differences
// on up to `max_coords` coordinates per input. The relative error is the L2
// norm of the difference over the L2 norm of the larger gradient vector.
inline GradCheck check_gradients(std::vector<Var<double>>& inputs,
                                 const std::function<Var<double>(std::vector<Var<double>>&)>& loss,
                                 double h = 1e-5, int max_coords = 40, std::uint64_t seed = 7) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    Var<double> out = loss(inputs);
    diffmark::ag::backward(out);

    diffmark::Rng rng(seed);
    double diff_sq = 0, a_sq = 0, n_sq = 0;
    GradCheck res;
    for (auto& in : inputs) {
        const std::size_t n = in.size();
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng.engine());
        idx.resize(std::min<std::size_t>(n, max_coords));
        const auto analytic = in.has_grad() ? in.grad().data : std::vector<double>(n, 0.0);
        for (std::size_t i : idx) {
            const double orig = in.value()[i];
            double plus, minus;
            {
                diffmark::ag::NoGradGuard ng;
                in.mutable_value()[i] = orig + h;
                plus = loss(inputs).item();
                in.mutable_value()[i] = orig - h;
                minus = loss(inputs).item();
                in.mutable_value()[i] = orig;
            }
            const double num = (plus - minus) / (2 * h);
            diff_sq += (num - analytic[i]) * (num - analytic[i]);
            a_sq += analytic[i] * analytic[i];
            n_sq += num * num;
            ++res.checked;
        }
    }
    res.analytic_norm = std::sqrt(a_sq);
    const double denom = std::max({std::sqrt(a_sq), std::sqrt(n_sq), 1e-12});
    res.rel_error = std::sqrt(diff_sq) / denom;
    return res;
}

inline Var<double> randn_var(diffmark::Rng& rng, diffmark::Shape s, double std = 1.0) {
    return Var<double>(rng.randn<double>(std::move(s), std), true);
}

}  // namespace testutil

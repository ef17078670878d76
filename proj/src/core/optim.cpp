#include "diffmark/nn/optim.hpp"

#include <algorithm>
#include <cmath>

#include "diffmark/simd/kernels.hpp"

namespace diffmark::nn {

AdamW::AdamW(State<float>& state, AdamWConfig cfg) : cfg_(cfg) {
    for (auto& [name, v] : state.params) {
        params_.push_back(v);
        names_.push_back(name);
        m_.emplace_back(v->shape());
        v_.emplace_back(v->shape());
    }
}

void AdamW::step(double lr) {
    ++step_;
    simd::AdamWArgs args{};
    args.lr = static_cast<float>(lr);
    args.beta1 = static_cast<float>(cfg_.beta1);
    args.beta2 = static_cast<float>(cfg_.beta2);
    args.eps = static_cast<float>(cfg_.eps);
    args.weight_decay = static_cast<float>(cfg_.weight_decay);
    args.bias_corr1 = static_cast<float>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step_)));
    args.bias_corr2 = static_cast<float>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step_)));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Var<float>& p = *params_[i];
        if (!p.has_grad()) continue;
        simd::active().adamw_f32(p.size(), p.mutable_value().ptr(), p.grad().ptr(), m_[i].ptr(), v_[i].ptr(), args);
    }
}

void AdamW::save_state(State<float>& out) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.buffer("m." + names_[i], m_[i]);
        out.buffer("v." + names_[i], v_[i]);
    }
}

double clip_grad_norm(State<float>& state, double max_norm) {
    double sq = 0.0;
    for (auto& [_, v] : state.params)
        if (v->has_grad())
            for (float g : v->grad().data) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const float s = static_cast<float>(max_norm / (norm + 1e-6));
        for (auto& [_, v] : state.params)
            if (v->has_grad())
                for (auto& g : v->grad_buffer().data) g *= s;
    }
    return norm;
}

double warmup_linear_lr(long step, long warmup, long total, double peak, double floor) {
    if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total <= warmup) return peak;
    const double frac = std::clamp(static_cast<double>(step - warmup) / static_cast<double>(total - warmup), 0.0, 1.0);
    return peak + (floor - peak) * frac;
}

}  // namespace diffmark::nn

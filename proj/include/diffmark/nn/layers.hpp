#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "diffmark/core/ops.hpp"
#include "diffmark/core/rng.hpp"

namespace diffmark::nn {

using ag::Var;

// Flat, ordered view of a model's trainable parameters and persistent
// buffers. Names are dotted paths and double as checkpoint file names.
template <typename T>
struct State {
    std::vector<std::pair<std::string, Var<T>*>> params;
    std::vector<std::pair<std::string, Tensor<T>*>> buffers;

    void param(const std::string& name, Var<T>& v) { params.emplace_back(name, &v); }
    void buffer(const std::string& name, Tensor<T>& t) { buffers.emplace_back(name, &t); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : params) n += v->size();
        return n;
    }
};

inline std::string join(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
Var<T> uniform_param(Rng& rng, Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return Var<T>(std::move(t), true);
}

template <typename T>
Var<T> const_param(Shape shape, T value) {
    return Var<T>(Tensor<T>(std::move(shape), value), true);
}

template <typename T>
struct Linear {
    Var<T> w, b;

    Linear() = default;
    Linear(Rng& rng, int in, int out, bool bias = true) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        w = uniform_param<T>(rng, {out, in}, bound);
        if (bias) b = uniform_param<T>(rng, {out}, bound);
    }
    Var<T> operator()(const Var<T>& x) const { return ag::linear(x, w, b); }
    void state(State<T>& s, const std::string& p) {
        s.param(join(p, "weight"), w);
        if (b.defined()) s.param(join(p, "bias"), b);
    }
    void zero_init() {
        for (auto& v : w.mutable_value().data) v = T(0);
        if (b.defined())
            for (auto& v : b.mutable_value().data) v = T(0);
    }
};

template <typename T>
struct Conv2d {
    Var<T> w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(Rng& rng, int cin, int cout, int k, int stride_, int pad_, bool bias = true)
        : stride(stride_), pad(pad_) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
        w = uniform_param<T>(rng, {cout, cin, k, k}, bound);
        if (bias) b = uniform_param<T>(rng, {cout}, bound);
    }
    Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, w, b, stride, pad); }
    void state(State<T>& s, const std::string& p) {
        s.param(join(p, "weight"), w);
        if (b.defined()) s.param(join(p, "bias"), b);
    }
    void zero_init() {
        for (auto& v : w.mutable_value().data) v = T(0);
        if (b.defined())
            for (auto& v : b.mutable_value().data) v = T(0);
    }
};

template <typename T>
struct BatchNorm {
    Var<T> gamma, beta;
    Tensor<T> running_mean, running_var;

    BatchNorm() = default;
    explicit BatchNorm(int ch)
        : gamma(const_param<T>({ch}, T(1))),
          beta(const_param<T>({ch}, T(0))),
          running_mean({ch}, T(0)),
          running_var({ch}, T(1)) {}
    // BatchNorm mutates running stats in training mode, hence non-const.
    Var<T> operator()(const Var<T>& x, bool training) {
        return ag::batch_norm(x, gamma, beta, running_mean, running_var, training);
    }
    void state(State<T>& s, const std::string& p) {
        s.param(join(p, "weight"), gamma);
        s.param(join(p, "bias"), beta);
        s.buffer(join(p, "running_mean"), running_mean);
        s.buffer(join(p, "running_var"), running_var);
    }
};

// Copies values between two states of identical layout (possibly different
// element types). Used to build 64-bit twins of float models.
template <typename Dst, typename Src>
void copy_state(State<Dst>& dst, const State<Src>& src) {
    if (dst.params.size() != src.params.size() || dst.buffers.size() != src.buffers.size())
        throw ShapeError("copy_state: layout mismatch");
    for (std::size_t i = 0; i < dst.params.size(); ++i) {
        const auto& sv = src.params[i].second->value();
        if (dst.params[i].first != src.params[i].first || dst.params[i].second->shape() != sv.shape)
            throw ShapeError("copy_state: parameter mismatch at " + dst.params[i].first);
        dst.params[i].second->mutable_value() = sv.template cast<Dst>();
    }
    for (std::size_t i = 0; i < dst.buffers.size(); ++i) {
        if (dst.buffers[i].second->shape != src.buffers[i].second->shape)
            throw ShapeError("copy_state: buffer mismatch at " + dst.buffers[i].first);
        *dst.buffers[i].second = src.buffers[i].second->template cast<Dst>();
    }
}

template <typename T>
void set_requires_grad(State<T>& s, bool r) {
    for (auto& [_, v] : s.params) v->set_requires_grad(r);
}

template <typename T>
void zero_grad(State<T>& s) {
    for (auto& [_, v] : s.params) v->zero_grad();
}

// Sinusoidal embedding of scalar positions (timesteps, guidance scales).
template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<double>& pos, int dim, double max_period = 10000.0) {
    const int nb = static_cast<int>(pos.size());
    const int half = dim / 2;
    Tensor<T> out({nb, dim});
    for (int b = 0; b < nb; ++b)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(max_period) * i / half);
            out[b * dim + i] = static_cast<T>(std::cos(pos[b] * freq));
            out[b * dim + half + i] = static_cast<T>(std::sin(pos[b] * freq));
        }
    return out;
}

}  // namespace diffmark::nn

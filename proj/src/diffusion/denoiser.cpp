#include "diffmark/diffusion/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "diffmark/nn/optim.hpp"

namespace diffmark::diffusion {

template <typename T>
ResBlock<T>::ResBlock(Rng& rng, int cin, int cout, int emb_dim)
    : c1(rng, cin, cout, 3, 1, 1), c2(rng, cout, cout, 3, 1, 1), emb(rng, emb_dim, cout), has_skip(cin != cout) {
    if (has_skip) skip = nn::Conv2d<T>(rng, cin, cout, 1, 1, 0);
}

template <typename T>
Var<T> ResBlock<T>::operator()(const Var<T>& x, const Var<T>& emb_act) const {
    Var<T> h = c1(ag::silu(x));
    h = ag::add_channel(h, emb(emb_act));
    h = c2(ag::silu(h));
    return ag::add(h, has_skip ? skip(x) : x);
}

template <typename T>
void ResBlock<T>::state(nn::State<T>& s, const std::string& p) {
    c1.state(s, nn::join(p, "conv1"));
    c2.state(s, nn::join(p, "conv2"));
    emb.state(s, nn::join(p, "emb"));
    if (has_skip) skip.state(s, nn::join(p, "skip"));
}

template <typename T>
ToyDenoiser<T>::ToyDenoiser(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    const int c = cfg.latent_channels, b = cfg.base, m = cfg.mid, e = cfg.emb_dim;
    t_fc1_ = nn::Linear<T>(rng, cfg.time_freq_dim, e);
    t_fc2_ = nn::Linear<T>(rng, e, e);
    if (cfg.guidance_embedding) {
        g_fc1_ = nn::Linear<T>(rng, cfg.time_freq_dim, e);
        g_fc2_ = nn::Linear<T>(rng, e, e);
        g_fc2_.zero_init();
    }
    label_table_ = nn::uniform_param<T>(rng, {cfg.num_classes + 1, e}, 1.0);
    conv_in_ = nn::Conv2d<T>(rng, c, b, 3, 1, 1);
    rb1_ = ResBlock<T>(rng, b, b, e);
    down1_ = nn::Conv2d<T>(rng, b, b, 3, 2, 1);
    rb2_ = ResBlock<T>(rng, b, m, e);
    down2_ = nn::Conv2d<T>(rng, m, m, 3, 2, 1);
    mid_ = ResBlock<T>(rng, m, m, e);
    up1_ = ResBlock<T>(rng, 2 * m, m, e);
    up2_ = ResBlock<T>(rng, m + b, b, e);
    conv_out_ = nn::Conv2d<T>(rng, b, c, 3, 1, 1);
}

template <typename T>
Var<T> ToyDenoiser<T>::operator()(const Var<T>& z, const std::vector<double>& t, const std::vector<int>& labels,
                                  const std::vector<double>* omega) const {
    const int nb = z.dim(0);
    if (z.shape().size() != 4 || z.dim(1) != cfg_.latent_channels || z.dim(2) % 4 || z.dim(3) % 4)
        throw ShapeError("denoiser input " + shape_str(z.shape()));
    if (static_cast<int>(t.size()) != nb || static_cast<int>(labels.size()) != nb)
        throw ShapeError("denoiser: timestep/label count does not match batch");
    if (evals_) evals_->fetch_add(1);

    Var<T> temb(nn::sinusoidal_embedding<T>(t, cfg_.time_freq_dim));
    Var<T> emb = t_fc2_(ag::silu(t_fc1_(temb)));
    std::vector<std::vector<int>> rows(nb);
    for (int i = 0; i < nb; ++i) {
        if (labels[i] < 0 || labels[i] > cfg_.num_classes) throw RangeError("denoiser: label out of range");
        rows[i] = {labels[i]};
    }
    emb = ag::add(emb, ag::embedding_sum(label_table_, rows));
    if (cfg_.guidance_embedding) {
        if (!omega || static_cast<int>(omega->size()) != nb)
            throw ShapeError("denoiser: guidance-embedded model needs one omega per sample");
        std::vector<double> scaled(*omega);
        for (auto& w : scaled) w *= 100.0;
        Var<T> gemb(nn::sinusoidal_embedding<T>(scaled, cfg_.time_freq_dim));
        emb = ag::add(emb, g_fc2_(ag::silu(g_fc1_(gemb))));
    }
    const Var<T> e = ag::silu(emb);

    const Var<T> h0 = conv_in_(z);
    const Var<T> h1 = rb1_(h0, e);
    const Var<T> h2 = rb2_(down1_(h1), e);
    const Var<T> mid = mid_(down2_(h2), e);
    const Var<T> u1 = up1_(ag::concat<T>({ag::upsample2x(mid), h2}, 1), e);
    const Var<T> u2 = up2_(ag::concat<T>({ag::upsample2x(u1), h1}, 1), e);
    return conv_out_(ag::silu(u2));
}

template <typename T>
void ToyDenoiser<T>::state(nn::State<T>& s, const std::string& p) {
    t_fc1_.state(s, nn::join(p, "time.fc1"));
    t_fc2_.state(s, nn::join(p, "time.fc2"));
    if (cfg_.guidance_embedding) {
        g_fc1_.state(s, nn::join(p, "guidance.fc1"));
        g_fc2_.state(s, nn::join(p, "guidance.fc2"));
    }
    s.param(nn::join(p, "label_table"), label_table_);
    conv_in_.state(s, nn::join(p, "conv_in"));
    rb1_.state(s, nn::join(p, "down1.res"));
    down1_.state(s, nn::join(p, "down1.conv"));
    rb2_.state(s, nn::join(p, "down2.res"));
    down2_.state(s, nn::join(p, "down2.conv"));
    mid_.state(s, nn::join(p, "mid"));
    up1_.state(s, nn::join(p, "up1"));
    up2_.state(s, nn::join(p, "up2"));
    conv_out_.state(s, nn::join(p, "conv_out"));
}

template <typename T>
ToyDenoiser<T> ToyDenoiser<T>::clone() const {
    return cast<T>();
}

template <typename T>
template <typename U>
ToyDenoiser<U> ToyDenoiser<T>::cast() const {
    ToyDenoiser<U> out(cfg_, 0);
    auto dst = out.state();
    auto src = const_cast<ToyDenoiser*>(this)->state();
    nn::copy_state(dst, src);
    for (auto& [_, v] : dst.params) v->set_requires_grad(true);
    return out;
}

template class ToyDenoiser<float>;
template class ToyDenoiser<double>;
template struct ResBlock<float>;
template struct ResBlock<double>;
template ToyDenoiser<double> ToyDenoiser<float>::cast<double>() const;
template ToyDenoiser<float> ToyDenoiser<double>::cast<float>() const;

std::string to_string(CfgConvention c) {
    switch (c) {
        case CfgConvention::guided_affine:
            return "guided_affine";
    }
    return "unknown";
}

Tensor<float> cfg_predict(const ToyDenoiser<float>& den, const Tensor<float>& z_t, int t,
                          const std::vector<int>& labels, const CfgConfig& cfg) {
    ag::NoGradGuard ng;
    const int nb = z_t.dim(0);
    if (cfg.w == 0.0) {
        return den(Var<float>(z_t), std::vector<double>(nb, t), labels).value();
    }
    Tensor<float> both({2 * nb, z_t.dim(1), z_t.dim(2), z_t.dim(3)});
    std::copy(z_t.data.begin(), z_t.data.end(), both.data.begin());
    std::copy(z_t.data.begin(), z_t.data.end(), both.data.begin() + z_t.size());
    std::vector<int> lab(labels);
    lab.resize(2 * nb, den.null_label());
    const Tensor<float> eps = den(Var<float>(std::move(both)), std::vector<double>(2 * nb, t), lab).value();
    Tensor<float> out(z_t.shape);
    const float a = static_cast<float>(1.0 + cfg.w), b = static_cast<float>(cfg.w);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * eps[i] - b * eps[i + out.size()];
    return out;
}

void inject(Tensor<float>& z, const Tensor<float>& delta, double scale) {
    const std::size_t per = z.size() / z.dim(0);
    const bool broadcast = delta.size() == per;
    if (!broadcast && delta.size() != z.size())
        throw ShapeError("delta " + shape_str(delta.shape) + " does not match latent batch " + shape_str(z.shape));
    const float s = static_cast<float>(scale);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += s * delta[broadcast ? i % per : i];
}

Tensor<float> ddim_sample(const ToyDenoiser<float>& den, const NoiseSchedule& sched, int steps,
                          const std::vector<int>& labels, const CfgConfig& cfg, const Tensor<float>& z_T,
                          const Tensor<float>* delta, double injection_scale) {
    const auto ts = ddim_timesteps(sched.T, steps);
    Tensor<float> z = z_T;
    const bool injecting = delta && injection_scale != 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        if (injecting) inject(z, *delta, injection_scale);
        const Tensor<float> eps = cfg_predict(den, z, ts[i], labels, cfg);
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : kTerminal;
        z = ddim_step(z, eps, ts[i], t_prev, sched);
    }
    return z;
}

Tensor<float> gather_rows(const Tensor<float>& x, const std::vector<int>& idx) {
    const std::size_t per = x.size() / x.dim(0);
    Shape s = x.shape;
    s[0] = static_cast<int>(idx.size());
    Tensor<float> out(s);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(x.ptr() + idx[i] * per, x.ptr() + (idx[i] + 1) * per, out.ptr() + i * per);
    return out;
}

Tensor<float> slice_batch(const Tensor<float>& x, int start, int count) {
    std::vector<int> idx(count);
    std::iota(idx.begin(), idx.end(), start);
    return gather_rows(x, idx);
}

namespace {

double eps_mse_batch(const ToyDenoiser<float>& model, const Tensor<float>& z0, const std::vector<int>& labels,
                     const NoiseSchedule& sched, Rng& rng, Var<float>* loss_out) {
    const int nb = z0.dim(0);
    const std::size_t per = z0.size() / nb;
    Tensor<float> eps = rng.randn<float>(z0.shape);
    Tensor<float> zt(z0.shape);
    std::vector<double> ts(nb);
    for (int i = 0; i < nb; ++i) {
        const int t = rng.randint(sched.T);
        ts[i] = t;
        const double a = std::sqrt(sched.alpha_bar[t]), b = std::sqrt(1.0 - sched.alpha_bar[t]);
        for (std::size_t j = 0; j < per; ++j)
            zt[i * per + j] = static_cast<float>(a * z0[i * per + j] + b * eps[i * per + j]);
    }
    Var<float> pred = model(Var<float>(std::move(zt)), ts, labels);
    Var<float> loss = ag::mean(ag::square(ag::sub(pred, Var<float>(std::move(eps)))));
    if (loss_out) *loss_out = loss;
    return loss.item();
}

}  // namespace

double denoiser_mse(const ToyDenoiser<float>& model, const Tensor<float>& latents, const std::vector<int>& labels,
                    const NoiseSchedule& sched, std::uint64_t seed) {
    ag::NoGradGuard ng;
    Rng rng = Rng::derive(seed, {0x7661});
    const int n = latents.dim(0);
    double total = 0;
    int count = 0;
    for (int s = 0; s < n; s += 64) {
        const int c = std::min(64, n - s);
        std::vector<int> lab(labels.begin() + s, labels.begin() + s + c);
        total += eps_mse_batch(model, slice_batch(latents, s, c), lab, sched, rng, nullptr) * c;
        count += c;
    }
    return count ? total / count : 0.0;
}

DenoiserTrainResult train_toy_denoiser(ToyDenoiser<float>& model, const Tensor<float>& latents,
                                       const std::vector<int>& labels, const NoiseSchedule& sched,
                                       const DenoiserTrainConfig& cfg) {
    DenoiserTrainResult res;
    if (cfg.epochs <= 0) return res;
    const int n = latents.dim(0);
    if (static_cast<int>(labels.size()) != n) throw ShapeError("train_toy_denoiser: label count mismatch");
    const int n_val = std::max(1, static_cast<int>(n * cfg.val_fraction));
    const int n_train = n - n_val;
    if (n_train < cfg.batch) throw ConfigError("train_toy_denoiser: dataset smaller than one batch");

    auto state = model.state();
    nn::AdamW opt(state, {0.9, 0.999, 1e-8, 0.0});
    const long steps_per_epoch = n_train / cfg.batch;
    const long total = steps_per_epoch * cfg.epochs;
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng perm_rng = Rng::derive(cfg.seed, {1, static_cast<std::uint64_t>(epoch)});
        std::vector<int> order(n_train);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), perm_rng.engine());
        for (long b = 0; b < steps_per_epoch; ++b, ++step) {
            Rng rng = Rng::derive(cfg.seed, {2, static_cast<std::uint64_t>(step)});
            std::vector<int> idx(order.begin() + b * cfg.batch, order.begin() + (b + 1) * cfg.batch);
            std::vector<int> lab(cfg.batch);
            for (int i = 0; i < cfg.batch; ++i)
                lab[i] = rng.bernoulli(cfg.cond_dropout) ? model.null_label() : labels[idx[i]];
            Var<float> loss;
            eps_mse_batch(model, gather_rows(latents, idx), lab, sched, rng, &loss);
            if (!std::isfinite(loss.item())) {
                std::ostringstream tr;
                for (double l : res.loss_trace) tr << l << "\n";
                throw TrainingError("denoiser loss became non-finite at step " + std::to_string(step), tr.str());
            }
            nn::zero_grad(state);
            ag::backward(loss);
            nn::clip_grad_norm(state, 1.0);
            opt.step(nn::warmup_linear_lr(step, std::min<long>(200, total / 10), total, cfg.lr, cfg.lr * 0.05));
            res.loss_trace.push_back(loss.item());
        }
    }
    nn::zero_grad(state);
    std::vector<int> val_lab(labels.begin() + n_train, labels.end());
    res.val_mse = denoiser_mse(model, slice_batch(latents, n_train, n_val), val_lab, sched, cfg.seed);
    if (res.val_mse > cfg.mse_threshold) {
        std::ostringstream tr;
        for (double l : res.loss_trace) tr << l << "\n";
        throw TrainingError("denoiser validation MSE " + std::to_string(res.val_mse) + " above threshold " +
                                std::to_string(cfg.mse_threshold),
                            tr.str());
    }
    return res;
}

}  // namespace diffmark::diffusion

#include "diffmark/lcm/consistency.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace diffmark::lcm {

using diffusion::DdimCoeffs;
using diffusion::ddim_coeffs;

double c_skip(int t, const Parameterization& p) {
    const double s = p.timestep_scaling * (t - p.t_min);
    return p.sigma_data * p.sigma_data / (s * s + p.sigma_data * p.sigma_data);
}

double c_out(int t, const Parameterization& p) {
    const double s = p.timestep_scaling * (t - p.t_min);
    return s / std::sqrt(s * s + p.sigma_data * p.sigma_data);
}

std::vector<int> distill_grid(int T, int k) {
    if (k < 1) throw PreconditionError("skipping step k must be >= 1");
    std::vector<int> g;
    for (int t = T - 1; t >= 0; t -= k) g.push_back(t);
    return g;
}

std::vector<int> lcm_timesteps(int T, int k, int K) {
    if (K < 1) throw PreconditionError("LCM needs K >= 1");
    const auto g = distill_grid(T, k);
    const int G = static_cast<int>(g.size());
    if (K > G) throw PreconditionError("K exceeds the distillation grid size");
    std::vector<int> out;
    for (int i = 0; i < K; ++i) out.push_back(g[static_cast<std::size_t>(i) * G / K]);
    return out;
}

template <typename T>
ConsistencyModel<T>::ConsistencyModel(const ToyDenoiser<float>& teacher, const Parameterization& param, int k,
                                      double omega)
    : param_(param), k_(k), omega_(omega) {
    if (k < 1) throw PreconditionError("skipping step k must be >= 1");
    auto cfg = teacher.config();
    cfg.guidance_embedding = true;
    student_ = ToyDenoiser<T>(cfg, 0x5eed);
    auto src = const_cast<ToyDenoiser<float>&>(teacher).state();
    std::map<std::string, const Var<float>*> by_name;
    for (auto& [n, v] : src.params) by_name[n] = v;
    auto dst = student_.state();
    for (auto& [n, v] : dst.params) {
        auto it = by_name.find(n);
        if (it == by_name.end()) continue;  // guidance embedding keeps its init
        if (it->second->shape() != v->shape()) throw ShapeError("teacher/student layout mismatch at " + n);
        v->mutable_value() = it->second->value().template cast<T>();
    }
    ema_ = student_.clone();
    nn::set_requires_grad(dst, true);
    auto es = ema_.state();
    nn::set_requires_grad(es, false);
}

template <typename T>
void ConsistencyModel<T>::state(nn::State<T>& s) {
    student_.state(s, "student");
    ema_.state(s, "ema");
}

template <typename T>
template <typename U>
ConsistencyModel<U> ConsistencyModel<T>::cast() const {
    ConsistencyModel<U> out;
    out.student_ = student_.template cast<U>();
    out.ema_ = ema_.template cast<U>();
    auto es = out.ema_.state();
    nn::set_requires_grad(es, false);
    out.param_ = param_;
    out.k_ = k_;
    out.omega_ = omega_;
    return out;
}

template class ConsistencyModel<float>;
template class ConsistencyModel<double>;
template ConsistencyModel<double> ConsistencyModel<float>::cast<double>() const;
template ConsistencyModel<float> ConsistencyModel<double>::cast<float>() const;

template <typename T>
Var<T> consistency_forward(const ToyDenoiser<T>& net, const NoiseSchedule& sched, const Parameterization& p,
                           const Var<T>& z_t, const std::vector<int>& t, const std::vector<double>& omega,
                           const std::vector<int>& labels) {
    const int nb = z_t.dim(0);
    if (static_cast<int>(t.size()) != nb) throw ShapeError("consistency_forward: one timestep per sample");
    std::vector<T> skip(nb), inv_sqrt_ab(nb), eps_coef(nb), out(nb);
    std::vector<double> td(nb);
    bool all_boundary = true;
    for (int i = 0; i < nb; ++i) {
        sched.check(t[i]);
        const double ab = sched.ab(t[i]);
        skip[i] = static_cast<T>(c_skip(t[i], p));
        out[i] = static_cast<T>(c_out(t[i], p));
        inv_sqrt_ab[i] = static_cast<T>(1.0 / std::sqrt(ab));
        eps_coef[i] = static_cast<T>(std::sqrt(1.0 - ab) / std::sqrt(ab));
        td[i] = t[i];
        all_boundary = all_boundary && t[i] == p.t_min;
    }
    // Boundary condition without touching the backbone.
    if (all_boundary) return ag::reshape(z_t, z_t.shape());
    const Var<T> eps = net(z_t, td, labels, &omega);
    const Var<T> x0 = ag::sub(ag::scale_rows(z_t, inv_sqrt_ab), ag::scale_rows(eps, eps_coef));
    return ag::add(ag::scale_rows(z_t, skip), ag::scale_rows(x0, out));
}

template Var<float> consistency_forward(const ToyDenoiser<float>&, const NoiseSchedule&, const Parameterization&,
                                        const Var<float>&, const std::vector<int>&, const std::vector<double>&,
                                        const std::vector<int>&);
template Var<double> consistency_forward(const ToyDenoiser<double>&, const NoiseSchedule&, const Parameterization&,
                                         const Var<double>&, const std::vector<int>&, const std::vector<double>&,
                                         const std::vector<int>&);

namespace {

template <typename T>
Var<T> add_delta(const Var<T>& z, const Var<T>& delta) {
    if (!delta.defined()) return z;
    if (delta.dim(0) == z.dim(0)) return ag::add(z, delta);
    if (delta.dim(0) != 1) throw ShapeError("delta batch must be 1 or match the latent batch");
    const int nb = z.dim(0);
    std::vector<Var<T>> reps(nb, delta);
    return ag::add(z, ag::concat(reps, 0));
}

}  // namespace

template <typename T>
Var<T> lcm_sample_differentiable(const ConsistencyModel<T>& model, const NoiseSchedule& sched, int K,
                                 const Var<T>& z_T, const Var<T>& delta, const std::vector<int>& labels) {
    const auto ts = lcm_timesteps(sched.T, model.k(), K);
    const int nb = z_T.dim(0);
    const std::vector<double> omega(nb, model.omega());
    Var<T> z = z_T;
    for (int i = 0; i < K; ++i) {
        const Var<T> zt = add_delta(z, delta);
        const Var<T> x0 = consistency_forward(model.student(), sched, model.param(), zt,
                                              std::vector<int>(nb, ts[i]), omega, labels);
        if (i + 1 == K) return x0;
        // Implied epsilon, then move x0 to the next timestep along it.
        const double ab = sched.ab(ts[i]), ab_next = sched.ab(ts[i + 1]);
        const T a = static_cast<T>(1.0 / std::sqrt(1.0 - ab)), b = static_cast<T>(std::sqrt(ab) / std::sqrt(1.0 - ab));
        const Var<T> eps = ag::sub(ag::scale(zt, a), ag::scale(x0, b));
        z = ag::add(ag::scale(x0, static_cast<T>(std::sqrt(ab_next))),
                    ag::scale(eps, static_cast<T>(std::sqrt(1.0 - ab_next))));
    }
    return z;
}

template Var<float> lcm_sample_differentiable(const ConsistencyModel<float>&, const NoiseSchedule&, int,
                                              const Var<float>&, const Var<float>&, const std::vector<int>&);
template Var<double> lcm_sample_differentiable(const ConsistencyModel<double>&, const NoiseSchedule&, int,
                                               const Var<double>&, const Var<double>&, const std::vector<int>&);

namespace {

// Guided teacher prediction with per-sample timestep and guidance scale.
Tensor<float> teacher_cfg(const ToyDenoiser<float>& teacher, const Tensor<float>& z, const std::vector<int>& t,
                          const std::vector<double>& omega, const std::vector<int>& labels) {
    ag::NoGradGuard ng;
    const int nb = z.dim(0);
    Tensor<float> both({2 * nb, z.dim(1), z.dim(2), z.dim(3)});
    std::copy(z.data.begin(), z.data.end(), both.data.begin());
    std::copy(z.data.begin(), z.data.end(), both.data.begin() + z.size());
    std::vector<double> td(2 * nb);
    std::vector<int> lab(2 * nb, teacher.null_label());
    for (int i = 0; i < nb; ++i) {
        td[i] = td[i + nb] = t[i];
        lab[i] = labels[i];
    }
    const Tensor<float> eps = teacher(Var<float>(std::move(both)), td, lab).value();
    Tensor<float> out(z.shape);
    const std::size_t per = z.size() / nb;
    for (int i = 0; i < nb; ++i) {
        const float a = static_cast<float>(1.0 + omega[i]), b = static_cast<float>(omega[i]);
        for (std::size_t j = i * per; j < (i + 1) * per; ++j) out[j] = a * eps[j] - b * eps[j + z.size()];
    }
    return out;
}

}  // namespace

Var<float> consistency_distance(const Var<float>& pred, const Var<float>& target, DistanceMetric m, double huber_c) {
    const Var<float> diff = ag::sub(pred, target);
    if (m == DistanceMetric::l2) return ag::mean(ag::square(diff));
    const float c = static_cast<float>(huber_c);
    return ag::add_scalar(ag::mean(ag::sqrt(ag::add_scalar(ag::square(diff), c * c))), -c);
}

DistillStepResult lcd_train_step(ConsistencyModel<float>& model, const ToyDenoiser<float>& teacher,
                                 const NoiseSchedule& sched, const DistillConfig& cfg, nn::AdamW& opt, double lr,
                                 const Tensor<float>& z0, const std::vector<int>& labels, Rng& rng) {
    if (cfg.k < 1 || model.k() < 1) throw PreconditionError("skipping step k must be >= 1");
    if (cfg.omega_min > cfg.omega_max) throw ConfigError("omega_min > omega_max");
    const auto grid = distill_grid(sched.T, cfg.k);
    const int nb = z0.dim(0);
    const std::size_t per = z0.size() / nb;
    std::vector<int> t_hi(nb), t_lo(nb);
    std::vector<double> omega(nb);
    for (int i = 0; i < nb; ++i) {
        t_hi[i] = grid[rng.randint(static_cast<int>(grid.size()))];
        t_lo[i] = std::max(t_hi[i] - cfg.k, model.param().t_min);
        omega[i] = cfg.omega_min == cfg.omega_max ? cfg.omega_min : rng.uniform(cfg.omega_min, cfg.omega_max);
    }
    const Tensor<float> noise = rng.randn<float>(z0.shape);
    Tensor<float> z_hi(z0.shape);
    for (int i = 0; i < nb; ++i) {
        const double ab = sched.ab(t_hi[i]);
        const float a = static_cast<float>(std::sqrt(ab)), b = static_cast<float>(std::sqrt(1.0 - ab));
        for (std::size_t j = i * per; j < (i + 1) * per; ++j) z_hi[j] = a * z0[j] + b * noise[j];
    }

    Tensor<float> target;
    {
        ag::NoGradGuard ng;
        const Tensor<float> eps = teacher_cfg(teacher, z_hi, t_hi, omega, labels);
        Tensor<float> z_lo(z0.shape);
        for (int i = 0; i < nb; ++i) {
            const DdimCoeffs c = ddim_coeffs(t_hi[i], t_lo[i], sched);
            for (std::size_t j = i * per; j < (i + 1) * per; ++j)
                z_lo[j] = static_cast<float>(c.c_z * z_hi[j] + c.c_eps * eps[j]);
        }
        target = consistency_forward(model.ema(), sched, model.param(), Var<float>(z_lo), t_lo, omega, labels).value();
    }

    const Var<float> pred = consistency_forward(model.student(), sched, model.param(), Var<float>(z_hi), t_hi, omega, labels);
    const Var<float> loss = consistency_distance(pred, Var<float>(target), cfg.metric, cfg.huber_c);
    DistillStepResult res;
    res.loss = loss.item();
    if (!std::isfinite(res.loss)) throw NumericError("consistency distillation loss is not finite");
    auto st = model.student().state();
    nn::zero_grad(st);
    ag::backward(loss);
    res.grad_norm = nn::clip_grad_norm(st, 1.0);
    opt.step(lr);
    nn::zero_grad(st);

    auto es = model.ema().state();
    const float mu = static_cast<float>(cfg.ema_rate);
    for (std::size_t p = 0; p < st.params.size(); ++p) {
        auto& e = es.params[p].second->mutable_value().data;
        const auto& s = st.params[p].second->value().data;
        for (std::size_t j = 0; j < e.size(); ++j) e[j] = mu * e[j] + (1.0f - mu) * s[j];
    }
    return res;
}

DistillResult distill(ConsistencyModel<float>& model, const ToyDenoiser<float>& teacher, const NoiseSchedule& sched,
                      const Tensor<float>& latents, const std::vector<int>& labels, const DistillConfig& cfg) {
    if (cfg.k != model.k()) throw ConfigError("distill: config k differs from the model's grid");
    DistillResult res;
    if (cfg.steps <= 0) return res;
    const int n = latents.dim(0);
    if (n < cfg.batch) throw ConfigError("distill: fewer latents than one batch");
    auto st = model.student().state();
    nn::AdamW opt(st, {0.9, 0.999, 1e-8, 0.0});
    const long warmup = std::min<long>(100, cfg.steps / 10);
    for (long step = 0; step < cfg.steps; ++step) {
        Rng rng = Rng::derive(cfg.seed, {0x1cd, static_cast<std::uint64_t>(step)});
        std::vector<int> idx(cfg.batch);
        for (auto& i : idx) i = rng.randint(n);
        std::vector<int> lab(cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) lab[i] = labels[idx[i]];
        const double lr = nn::warmup_linear_lr(step, warmup, cfg.steps, cfg.lr, cfg.lr * 0.1);
        try {
            res.loss_trace.push_back(
                lcd_train_step(model, teacher, sched, cfg, opt, lr, diffusion::gather_rows(latents, idx), lab, rng).loss);
        } catch (const NumericError& e) {
            std::ostringstream tr;
            for (double l : res.loss_trace) tr << l << "\n";
            throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step), tr.str());
        }
    }
    return res;
}

double self_consistency_error(const ConsistencyModel<float>& model, const ToyDenoiser<float>& teacher,
                              const NoiseSchedule& sched, const Tensor<float>& z_T, const std::vector<int>& labels) {
    ag::NoGradGuard ng;
    const auto grid = distill_grid(sched.T, model.k());
    const int nb = z_T.dim(0);
    const std::vector<double> omega(nb, model.omega());
    std::vector<Tensor<float>> traj{z_T};
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const int t = grid[i];
        const int t_prev = std::max(t - model.k(), model.param().t_min);
        const Tensor<float> eps = teacher_cfg(teacher, traj.back(), std::vector<int>(nb, t), omega, labels);
        traj.push_back(diffusion::ddim_step(traj.back(), eps, t, t_prev, sched));
    }
    const Tensor<float>& end = traj.back();
    double acc = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const Tensor<float> f = consistency_forward(model.student(), sched, model.param(), Var<float>(traj[i]),
                                                    std::vector<int>(nb, grid[i]), omega, labels)
                                    .value();
        double se = 0;
        for (std::size_t j = 0; j < f.size(); ++j) se += (double(f[j]) - end[j]) * (double(f[j]) - end[j]);
        acc += std::sqrt(se / f.size());
    }
    return acc / grid.size();
}

}  // namespace diffmark::lcm

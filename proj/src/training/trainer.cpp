#include "diffmark/training/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

#include "diffmark/io/checkpoint.hpp"

namespace diffmark::training {

namespace {

const std::vector<std::string> kRecTerms{"lcm", "ddim", "mag", "kl"};
const std::vector<std::string> kImpTerms{"lafid", "prvl", "freq", "neg", "regen"};
const std::vector<std::string> kAllTerms{"lcm", "ddim", "mag", "kl", "lafid", "prvl", "freq", "neg", "regen"};

double term_weight(const std::string& term, long t, const CurriculumConfig& c) {
    const LossWeights& w = c.weights;
    if (term == "lcm") return w.lcm;
    if (term == "ddim") return w.ddim;
    if (term == "mag") return w.mag;
    if (term == "kl") return kl_beta(t, c);
    if (term == "lafid") return w.lafid;
    if (term == "prvl") return w.prvl;
    if (term == "freq") return w.freq;
    if (term == "neg") return w.neg;
    if (term == "regen") return w.regen;
    throw ConfigError("unknown loss term " + term);
}

double per_sample_std(const Tensor<float>& d) {
    const int nb = d.dim(0);
    const std::size_t per = d.size() / nb;
    double acc = 0;
    for (int b = 0; b < nb; ++b) {
        double m = 0, sq = 0;
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            m += d[i];
            sq += double(d[i]) * d[i];
        }
        m /= per;
        acc += std::sqrt(std::max(0.0, sq / per - m * m));
    }
    return acc / nb;
}

Tensor<float> stack(const Tensor<float>& a, const Tensor<float>& b) {
    Shape s = a.shape;
    s[0] += b.dim(0);
    Tensor<float> out(s);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.size());
    return out;
}

}  // namespace

std::string to_string(InjectionScale s) { return s == InjectionScale::full ? "full" : "one_over_N"; }

double injection_factor(InjectionScale s, int steps) {
    if (steps < 1) throw RangeError("injection_factor: steps must be >= 1");
    return s == InjectionScale::full ? 1.0 : 1.0 / steps;
}

void validate(const TrainConfig& cfg) {
    const auto& c = cfg.curriculum;
    if (c.tau_rec > c.tau_imp)
        throw ConfigError("curriculum: reconstruction gate (" + std::to_string(c.tau_rec) +
                          ") must open no later than the imperceptibility gate (" + std::to_string(c.tau_imp) + ")");
    if (!(c.sigma_start > c.sigma_end && c.sigma_end > 0))
        throw ConfigError("curriculum: need sigma_start > sigma_end > 0");
    if (cfg.batch < 1 || cfg.ddim_steps < 1 || cfg.lcm_steps < 1 || cfg.steps < 0)
        throw ConfigError("training: batch, ddim_steps, lcm_steps must be positive");
    if (cfg.prvl_kernel < 1) throw ConfigError("training: prvl_kernel must be positive");
}

long anneal_horizon(const TrainConfig& cfg) {
    return cfg.curriculum.anneal_steps > 0 ? cfg.curriculum.anneal_steps : std::max<long>(1, cfg.steps / 2);
}

long warmup_steps(const TrainConfig& cfg) { return cfg.warmup > 0 ? cfg.warmup : cfg.steps / 20; }

double anneal_sigma_target(long t, double sigma_s, double sigma_e, long horizon) {
    if (horizon <= 0) return sigma_e;
    const double frac = std::min(static_cast<double>(t) / static_cast<double>(horizon), 1.0);
    return sigma_s + (sigma_e - sigma_s) / 2.0 * (1.0 - std::cos(std::numbers::pi * std::max(frac, 0.0)));
}

double kl_beta(long t, const CurriculumConfig& c) {
    if (c.beta_warmup <= 0) return c.beta_end;
    const double frac = std::clamp(static_cast<double>(t) / static_cast<double>(c.beta_warmup), 0.0, 1.0);
    return c.beta_start + (c.beta_end - c.beta_start) * frac;
}

bool in_imperceptibility_group(const std::string& term) {
    return std::find(kImpTerms.begin(), kImpTerms.end(), term) != kImpTerms.end();
}

bool gate_open(const std::string& term, long t, const CurriculumConfig& c) {
    if (in_imperceptibility_group(term)) return t >= c.tau_imp;
    if (std::find(kRecTerms.begin(), kRecTerms.end(), term) != kRecTerms.end()) return t >= c.tau_rec;
    throw ConfigError("unknown loss term " + term);
}

template <typename T>
Var<T> lafid_loss(const Var<T>& z0_lcm, const Var<T>& z0_lcm_clean) {
    return ag::mean(ag::square(ag::sub(z0_lcm, ag::detach(z0_lcm_clean))));
}

template <typename T>
Var<T> prvl_loss(const Var<T>& x_wm, const Var<T>& x_clean, int kernel) {
    const int k = std::min({kernel, x_wm.dim(2), x_wm.dim(3)});
    const Var<T> diff = ag::mean_channels(ag::abs(ag::sub(x_wm, x_clean)));
    return ag::mean(ag::max_rows(ag::avg_pool(diff, k)));
}

Tensor<float> low_frequency_mask(int h, int w, double radius) {
    Tensor<float> m({h, w});
    for (int u = 0; u < h; ++u)
        for (int v = 0; v < w; ++v) {
            // Position after shifting DC to (h/2, w/2).
            const double du = (u + h / 2) % h - h / 2, dv = (v + w / 2) % w - w / 2;
            if (du * du + dv * dv <= radius * radius) m[u * w + v] = 1.0f;
        }
    return m;
}

template <typename T>
Var<T> freq_loss(const Var<T>& delta, double radius) {
    const int h = delta.dim(2), w = delta.dim(3);
    const Tensor<T> disk = low_frequency_mask(h, w, radius).template cast<T>();
    double n_disk = 0;
    for (T v : disk.data) n_disk += v;
    if (n_disk == 0) throw ConfigError("freq_loss: radius contains no frequency bins");
    const Tensor<T> all({h, w}, T(1));
    const Var<T> inside = ag::scale(ag::masked_power(delta, disk), static_cast<T>(1.0 / n_disk));
    const Var<T> total = ag::scale(ag::masked_power(delta, all), static_cast<T>(1.0 / (h * w)));
    const Var<T> inv = ag::exp(ag::scale(ag::log(ag::add_scalar(total, T(1e-8))), T(-1)));
    return ag::mean(ag::mul(inside, inv));
}

template <typename T>
Var<T> neg_entropy_loss(const Var<T>& logits) {
    const int nb = logits.dim(0), L = logits.dim(1);
    const Var<T> lp = ag::log_softmax(logits);
    return ag::scale(ag::sum(ag::mul(ag::exp(lp), lp)), static_cast<T>(1.0 / (nb * L)));
}

#define DIFFMARK_INSTANTIATE_TRAIN_LOSSES(T)                   \
    template Var<T> lafid_loss(const Var<T>&, const Var<T>&);  \
    template Var<T> prvl_loss(const Var<T>&, const Var<T>&, int); \
    template Var<T> freq_loss(const Var<T>&, double);          \
    template Var<T> neg_entropy_loss(const Var<T>&);

DIFFMARK_INSTANTIATE_TRAIN_LOSSES(float)
DIFFMARK_INSTANTIATE_TRAIN_LOSSES(double)

Trainer::Trainer(codec::Encoder<float>& enc, codec::Decoder<float>& dec, FrozenModels models, TrainConfig cfg)
    : enc_(enc), dec_(dec), m_(std::move(models)), cfg_(std::move(cfg)) {
    validate(cfg_);
    if (!m_.denoiser || !m_.lcm || !m_.vae) throw PreconditionError("trainer needs denoiser, LCM and VAE");
    if (m_.schedule.T == 0) m_.schedule = diffusion::NoiseSchedule::linear();
    // Frozen models never accumulate gradients.
    auto freeze = [](auto* model) {
        auto s = const_cast<std::remove_const_t<std::remove_pointer_t<decltype(model)>>*>(model)->state();
        nn::set_requires_grad(s, false);
    };
    freeze(m_.denoiser);
    freeze(m_.vae);
    {
        auto* lcm = const_cast<lcm::ConsistencyModel<float>*>(m_.lcm);
        auto s = lcm->state();
        nn::set_requires_grad(s, false);
    }
    enc_state_ = enc_.state();
    dec_state_ = dec_.state();
    opt_enc_ = nn::AdamW(enc_state_, {});
    opt_dec_ = nn::AdamW(dec_state_, {});
    const int size = enc_.config().latent_size;
    const double radius = cfg_.freq_radius > 0 ? cfg_.freq_radius : 10.0 * size / 64.0;
    if (low_frequency_mask(size, size, radius).data == Tensor<float>({size, size}).data)
        throw ConfigError("freq_radius contains no frequency bins");
    cfg_.freq_radius = radius;
}

StepReport Trainer::step() {
    const long t = step_;
    const auto& cur = cfg_.curriculum;
    const int B = cfg_.batch, L = enc_.config().bits;
    const int C = enc_.config().latent_channels, S = enc_.config().latent_size;
    Rng rng = Rng::derive(cfg_.seed, {0x7a1, static_cast<std::uint64_t>(t)});
    std::vector<Secret> secrets;
    std::vector<int> labels(B);
    for (int b = 0; b < B; ++b) secrets.push_back(Secret::random(L, rng));
    for (auto& l : labels) l = rng.randint(m_.denoiser->null_label());
    const Tensor<float> zT = rng.randn<float>({B, C, S, S});

    auto active = [&](const std::string& term) { return gate_open(term, t, cur) && term_weight(term, t, cur) != 0.0; };

    std::map<std::string, Var<float>> terms;
    const auto pert = enc_(secrets, true, &rng, true);

    // LCM path: differentiable back to the encoder.
    Var<float> z0_lcm;
    if (active("lcm") || active("lafid") || active("prvl")) {
        z0_lcm = lcm::lcm_sample_differentiable(*m_.lcm, m_.schedule, cfg_.lcm_steps, Var<float>(zT), pert.delta, labels);
    }
    Tensor<float> logits_lcm;
    if (active("lcm")) {
        const Var<float> lg = dec_(z0_lcm, true);
        logits_lcm = lg.value();
        terms["lcm"] = codec::ce_loss(lg, secrets);
    }

    // DDIM path on the stop-gradient delta; the clean half rides in the same batch.
    const bool need_clean = active("neg");
    const Tensor<float> dbar = ag::detach(pert.delta).value();
    Tensor<float> z0_ddim, z0_clean;
    {
        const double f = injection_factor(cfg_.train_injection, cfg_.ddim_steps);
        const diffusion::CfgConfig g{cfg_.guidance};
        if (need_clean) {
            std::vector<int> lab2 = labels;
            lab2.insert(lab2.end(), labels.begin(), labels.end());
            const Tensor<float> d2 = stack(dbar, Tensor<float>(dbar.shape));
            const Tensor<float> both = diffusion::ddim_sample(*m_.denoiser, m_.schedule, cfg_.ddim_steps, lab2, g,
                                                              stack(zT, zT), &d2, f);
            z0_ddim = diffusion::slice_batch(both, 0, B);
            z0_clean = diffusion::slice_batch(both, B, B);
        } else {
            z0_ddim = diffusion::ddim_sample(*m_.denoiser, m_.schedule, cfg_.ddim_steps, labels, g, zT, &dbar, f);
        }
    }
    Tensor<float> logits_ddim;
    if (active("ddim")) {
        const Var<float> lg = dec_(Var<float>(z0_ddim), true);
        logits_ddim = lg.value();
        terms["ddim"] = codec::ce_loss(lg, secrets);
    }

    const double sigma_t = anneal_sigma_target(t, cur.sigma_start, cur.sigma_end, anneal_horizon(cfg_));
    if (active("mag")) terms["mag"] = codec::mag_loss(pert.delta, sigma_t);
    if (active("kl")) terms["kl"] = codec::kl_loss(pert.mu, pert.log_var);

    if (active("lafid") || active("prvl")) {
        Tensor<float> clean_lcm;
        {
            ag::NoGradGuard ng;
            clean_lcm = lcm::lcm_sample_differentiable(*m_.lcm, m_.schedule, cfg_.lcm_steps, Var<float>(zT),
                                                       Var<float>(), labels)
                            .value();
        }
        if (active("lafid")) terms["lafid"] = lafid_loss(z0_lcm, Var<float>(clean_lcm));
        if (active("prvl")) {
            const Var<float> x_wm = m_.vae->decode(z0_lcm);
            const Tensor<float> x_clean = m_.vae->decode(clean_lcm);
            terms["prvl"] = prvl_loss(x_wm, Var<float>(x_clean), cfg_.prvl_kernel);
        }
    }
    if (active("freq")) terms["freq"] = freq_loss(pert.delta, cfg_.freq_radius);
    Tensor<float> logits_clean;
    if (need_clean) {
        const Var<float> lg = dec_(Var<float>(z0_clean), true);
        logits_clean = lg.value();
        terms["neg"] = neg_entropy_loss(lg);
    }
    if (active("regen")) {
        const Tensor<float> z0_regen = m_.vae->encode(m_.vae->decode(z0_ddim));
        terms["regen"] = codec::ce_loss(dec_(Var<float>(z0_regen), true), secrets);
    }

    StepReport rep;
    rep.step = t;
    rep.sigma_target = sigma_t;
    Var<float> total;
    for (const auto& [name, v] : terms) {
        rep.losses[name] = v.item();
        const Var<float> wv = ag::scale(v, static_cast<float>(term_weight(name, t, cur)));
        total = total.defined() ? ag::add(total, wv) : wv;
    }
    bool finite = true;
    for (const auto& [name, v] : rep.losses) finite = finite && std::isfinite(v);
    if (!finite || !total.defined() || !std::isfinite(total.item())) {
        std::ostringstream dump;
        dump << "step " << t;
        for (const auto& [name, v] : rep.losses) dump << " " << name << "=" << v;
        throw TrainingError("non-finite training loss at step " + std::to_string(t), dump.str());
    }
    rep.total = total.item();
    if (on_losses) on_losses(terms);

    nn::zero_grad(enc_state_);
    nn::zero_grad(dec_state_);
    ag::backward(total);
    nn::clip_grad_norm(enc_state_, cfg_.clip_encoder);
    nn::clip_grad_norm(dec_state_, cfg_.clip_decoder);
    const long warm = warmup_steps(cfg_);
    opt_enc_.step(nn::warmup_linear_lr(t, warm, cfg_.steps, cfg_.lr_encoder, cfg_.lr_floor));
    opt_dec_.step(nn::warmup_linear_lr(t, warm, cfg_.steps, cfg_.lr_decoder, cfg_.lr_floor));
    nn::zero_grad(enc_state_);
    nn::zero_grad(dec_state_);

    rep.std_delta = per_sample_std(pert.delta.value());
    rep.bit_acc_lcm = logits_lcm.empty() ? std::numeric_limits<double>::quiet_NaN() : codec::bit_accuracy(logits_lcm, secrets);
    if (logits_ddim.empty()) {
        ag::NoGradGuard ng;
        logits_ddim = dec_(Var<float>(z0_ddim), false).value();
    }
    rep.bit_acc_ddim = codec::bit_accuracy(logits_ddim, secrets);
    rep.clean_ber = logits_clean.empty() ? std::numeric_limits<double>::quiet_NaN()
                                         : 1.0 - codec::bit_accuracy(logits_clean, secrets);
    ++step_;
    return rep;
}

double Trainer::ddim_encoder_grad_norm() {
    const int B = cfg_.batch, L = enc_.config().bits;
    const int C = enc_.config().latent_channels, S = enc_.config().latent_size;
    Rng rng = Rng::derive(cfg_.seed, {0x9b0, static_cast<std::uint64_t>(step_)});
    std::vector<Secret> secrets;
    std::vector<int> labels(B);
    for (int b = 0; b < B; ++b) secrets.push_back(Secret::random(L, rng));
    for (auto& l : labels) l = rng.randint(m_.denoiser->null_label());
    const Tensor<float> zT = rng.randn<float>({B, C, S, S});
    const auto pert = enc_(secrets, true, &rng, true);
    const Tensor<float> dbar = ag::detach(pert.delta).value();
    const Tensor<float> z0 = diffusion::ddim_sample(*m_.denoiser, m_.schedule, cfg_.ddim_steps, labels,
                                                    {cfg_.guidance}, zT, &dbar,
                                                    injection_factor(cfg_.train_injection, cfg_.ddim_steps));
    const Var<float> loss = codec::ce_loss(dec_(Var<float>(z0), true), secrets);
    nn::zero_grad(enc_state_);
    nn::zero_grad(dec_state_);
    ag::backward(loss);
    double sq = 0;
    for (auto& [_, v] : enc_state_.params)
        if (v->has_grad())
            for (float g : v->grad().data) sq += double(g) * g;
    nn::zero_grad(enc_state_);
    nn::zero_grad(dec_state_);
    return std::sqrt(sq);
}

nn::State<float> Trainer::optimizer_state() {
    nn::State<float> s;
    nn::State<float> e, d;
    opt_enc_.save_state(e);
    opt_dec_.save_state(d);
    for (auto& [n, t] : e.buffers) s.buffer("opt_encoder." + n, *t);
    for (auto& [n, t] : d.buffers) s.buffer("opt_decoder." + n, *t);
    return s;
}

void Trainer::save(const std::filesystem::path& dir) {
    nn::State<float> all;
    enc_.state(all, "encoder");
    dec_.state(all, "decoder");
    auto opt = optimizer_state();
    for (auto& [n, t] : opt.buffers) all.buffer(n, *t);
    nlohmann::json meta{{"step", step_},
                        {"codec", enc_.config()},
                        {"train", cfg_},
                        {"alpha", enc_.alpha().item()}};
    io::save_checkpoint(dir, "watermark", meta, all);
}

void Trainer::load(const std::filesystem::path& dir) {
    nn::State<float> all;
    enc_.state(all, "encoder");
    dec_.state(all, "decoder");
    auto opt = optimizer_state();
    for (auto& [n, t] : opt.buffers) all.buffer(n, *t);
    const auto manifest = io::load_checkpoint(dir, "watermark", all);
    step_ = manifest["meta"]["step"].get<long>();
    opt_enc_.set_step(step_);
    opt_dec_.set_step(step_);
}

std::string csv_header() {
    std::string h = "step";
    for (const auto& t : kAllTerms) h += ",loss_" + t;
    return h + ",total,std_delta,sigma_target,bit_acc_lcm,bit_acc_ddim,clean_ber,config_hash";
}

std::string csv_row(const StepReport& r, const std::string& config_hash) {
    std::ostringstream o;
    o << std::setprecision(8) << r.step;
    for (const auto& t : kAllTerms) {
        o << ",";
        if (auto it = r.losses.find(t); it != r.losses.end()) o << it->second;
    }
    o << "," << r.total << "," << r.std_delta << "," << r.sigma_target << "," << r.bit_acc_lcm << ","
      << r.bit_acc_ddim << "," << r.clean_ber << "," << config_hash;
    return o.str();
}

RunResult run_training(Trainer& trainer, const std::filesystem::path& csv, const std::string& config_hash,
                       long checkpoint_every, const std::filesystem::path& checkpoint_dir,
                       const std::function<bool(const StepReport&)>& stop) {
    RunResult res;
    std::ofstream out;
    if (!csv.empty()) {
        const bool append = trainer.current_step() > 0 && std::filesystem::exists(csv);
        if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
        out.open(csv, append ? std::ios::app : std::ios::trunc);
        if (!append) out << csv_header() << "\n";
    }
    while (trainer.current_step() < trainer.config().steps) {
        StepReport r = trainer.step();
        if (out.is_open()) out << csv_row(r, config_hash) << "\n";
        res.history.push_back(r);
        if (checkpoint_every > 0 && !checkpoint_dir.empty() && trainer.current_step() % checkpoint_every == 0)
            trainer.save(checkpoint_dir);
        if (stop && stop(r)) break;
    }
    if (!checkpoint_dir.empty()) trainer.save(checkpoint_dir);
    return res;
}

CollapseOutcome collapse_probe(Trainer& trainer, long max_steps, double collapse_fraction, double acc_threshold,
                               int window) {
    CollapseOutcome out;
    std::vector<double> accs;
    const double floor = collapse_fraction * trainer.config().curriculum.sigma_start;
    for (long i = 0; i < max_steps; ++i) {
        const StepReport r = trainer.step();
        out.steps = i + 1;
        out.final_std = r.std_delta;
        accs.push_back(r.bit_acc_ddim);
        if (static_cast<int>(accs.size()) > window) accs.erase(accs.begin());
        double m = 0;
        for (double a : accs) m += a;
        out.final_acc = m / accs.size();
        if (r.std_delta < floor) {
            out.collapsed = true;
            break;
        }
        if (static_cast<int>(accs.size()) == window && out.final_acc > acc_threshold) {
            out.learned = true;
            break;
        }
    }
    return out;
}

}  // namespace diffmark::training

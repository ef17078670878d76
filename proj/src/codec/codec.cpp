#include "diffmark/codec/codec.hpp"

#include <bit>
#include <cmath>

namespace diffmark::codec {

Secret::Secret(std::vector<int> b) : bits(std::move(b)) {
    if (bits.empty()) throw ShapeError("secret must have at least one bit");
    for (int v : bits)
        if (v != 0 && v != 1) throw RangeError("secret bits must be 0 or 1");
}

Secret Secret::random(int L, Rng& rng) {
    if (L < 1) throw ShapeError("secret length must be >= 1");
    std::vector<int> b(L);
    for (auto& v : b) v = rng.bernoulli() ? 1 : 0;
    return Secret(std::move(b));
}

Secret Secret::parse(const std::string& s) {
    std::vector<int> b;
    for (char c : s) {
        if (c != '0' && c != '1') throw RangeError("secret string may contain only 0 and 1");
        b.push_back(c - '0');
    }
    return Secret(std::move(b));
}

std::string Secret::str() const {
    std::string s;
    for (int v : bits) s.push_back(static_cast<char>('0' + v));
    return s;
}

int hamming(const Secret& a, const Secret& b) {
    if (a.size() != b.size()) throw ShapeError("hamming: length mismatch");
    int d = 0;
    for (int i = 0; i < a.size(); ++i) d += a.bits[i] != b.bits[i];
    return d;
}

namespace {

int log2_exact(int n) {
    if (n < 4 || !std::has_single_bit(static_cast<unsigned>(n)))
        throw ConfigError("latent size must be a power of two >= 4");
    return std::countr_zero(static_cast<unsigned>(n));
}

}  // namespace

template <typename T>
Encoder<T>::Encoder(const CodecConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.bits < 1 || cfg.embed_dim < 1) throw ConfigError("codec: bits and embed_dim must be positive");
    if (cfg.alpha_init <= 0) throw ConfigError("codec: alpha_init must be positive");
    Rng rng = Rng::derive(seed, {0xe1c});
    const int hw = cfg.latent_size * cfg.latent_size;
    // Summed embeddings and the modulated map both start near unit variance.
    table_ = Var<T>(rng.randn<T>({2 * cfg.bits, cfg.embed_dim}), true);
    basis_ = Var<T>(rng.randn<T>({cfg.embed_dim, hw}), true);
    log_alpha_ = nn::const_param<T>({1}, static_cast<T>(std::log(cfg.alpha_init)));
    r1_ = nn::Conv2d<T>(rng, cfg.embed_dim, 32, 3, 1, 1);
    bn1_ = nn::BatchNorm<T>(32);
    r2_ = nn::Conv2d<T>(rng, 32, 16, 3, 1, 1);
    bn2_ = nn::BatchNorm<T>(16);
    r3_ = nn::Conv2d<T>(rng, 16, 8, 3, 1, 1);
    head_mu_ = nn::Conv2d<T>(rng, 8, cfg.latent_channels, 3, 1, 1);
    head_lv_ = nn::Conv2d<T>(rng, 8, cfg.latent_channels, 3, 1, 1);
}

template <typename T>
Perturbation<T> Encoder<T>::operator()(const std::vector<Secret>& secrets, bool sample, Rng* rng, bool training) {
    if (secrets.empty()) throw ShapeError("encoder: empty secret batch");
    const int nb = static_cast<int>(secrets.size());
    const int s = cfg_.latent_size;
    std::vector<std::vector<int>> rows(nb);
    for (int b = 0; b < nb; ++b) {
        if (secrets[b].size() != cfg_.bits)
            throw ShapeError("encoder expects " + std::to_string(cfg_.bits) + "-bit secrets, got " +
                             std::to_string(secrets[b].size()));
        rows[b].resize(cfg_.bits);
        for (int i = 0; i < cfg_.bits; ++i) rows[b][i] = 2 * i + secrets[b].bits[i];
    }
    const Var<T> x = ag::embedding_sum(table_, rows);
    // X[d, i, j] = sum_d' x[d'] B[d', i, j], identical across d.
    const Var<T> map = ag::reshape(ag::matmul(x, basis_), {nb, 1, s, s});
    Var<T> h = ag::repeat_channels(map, cfg_.embed_dim);
    h = bn1_(ag::silu(r1_(h)), training);
    h = bn2_(ag::silu(r2_(h)), training);
    h = ag::silu(r3_(h));
    Perturbation<T> out;
    out.mu = head_mu_(h);
    out.log_var = head_lv_(h);
    Var<T> raw = out.mu;
    if (sample) {
        if (!rng) throw PreconditionError("encoder: sampling requires an rng");
        const Var<T> eta(rng->randn<T>(out.mu.shape()));
        raw = ag::add(out.mu, ag::mul(ag::exp(ag::scale(out.log_var, T(0.5))), eta));
    }
    out.delta = ag::mul_scalar(raw, alpha());
    return out;
}

template <typename T>
Tensor<float> Encoder<T>::delta(const Secret& s) {
    ag::NoGradGuard ng;
    return (*this)({s}, false, nullptr, false).delta.value().template cast<float>();
}

template <typename T>
void Encoder<T>::state(nn::State<T>& s, const std::string& p) {
    s.param(nn::join(p, "bit_embeddings"), table_);
    s.param(nn::join(p, "basis"), basis_);
    r1_.state(s, nn::join(p, "refine1"));
    bn1_.state(s, nn::join(p, "refine1_bn"));
    r2_.state(s, nn::join(p, "refine2"));
    bn2_.state(s, nn::join(p, "refine2_bn"));
    r3_.state(s, nn::join(p, "refine3"));
    head_mu_.state(s, nn::join(p, "head_mu"));
    head_lv_.state(s, nn::join(p, "head_logvar"));
    s.param(nn::join(p, "log_alpha"), log_alpha_);
}

template <typename T>
template <typename U>
Encoder<U> Encoder<T>::cast() const {
    Encoder<U> out(cfg_, 0);
    auto dst = out.state();
    auto src = const_cast<Encoder*>(this)->state();
    nn::copy_state(dst, src);
    return out;
}

template <typename T>
Decoder<T>::Decoder(const CodecConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng = Rng::derive(seed, {0xdec});
    const int blocks = log2_exact(cfg.latent_size) - 1;
    conv_in_ = nn::Conv2d<T>(rng, cfg.latent_channels, 8, 3, 1, 1);
    int ch = 8;
    for (int i = 0; i < blocks; ++i) {
        down_.emplace_back(rng, ch, 2 * ch, 4, 2, 1);
        ch *= 2;
        if (i + 1 < blocks) bn_.emplace_back(ch);
    }
    const int flat = ch * 4;
    fc1_ = nn::Linear<T>(rng, flat, flat);
    fc2_ = nn::Linear<T>(rng, flat, flat / 2);
    fc3_ = nn::Linear<T>(rng, flat / 2, 2 * cfg.bits);
}

template <typename T>
Var<T> Decoder<T>::operator()(const Var<T>& z, bool training) {
    if (z.shape().size() != 4 || z.dim(1) != cfg_.latent_channels || z.dim(2) != cfg_.latent_size ||
        z.dim(3) != cfg_.latent_size)
        throw ShapeError("decoder expects (N, " + std::to_string(cfg_.latent_channels) + ", " +
                         std::to_string(cfg_.latent_size) + ", " + std::to_string(cfg_.latent_size) + "), got " +
                         shape_str(z.shape()));
    decoded_->fetch_add(z.dim(0));
    const int nb = z.dim(0);
    Var<T> h = ag::silu(conv_in_(z));
    for (std::size_t i = 0; i < down_.size(); ++i) {
        h = ag::silu(down_[i](h));
        if (i < bn_.size()) h = bn_[i](h, training);
    }
    h = ag::reshape(h, {nb, static_cast<int>(h.size() / nb)});
    h = ag::silu(fc1_(h));
    h = ag::silu(fc2_(h));
    return ag::reshape(fc3_(h), {nb, cfg_.bits, 2});
}

template <typename T>
std::vector<Secret> Decoder<T>::decode(const Tensor<float>& z) {
    ag::NoGradGuard ng;
    const Tensor<T> logits = (*this)(Var<T>(z.template cast<T>()), false).value();
    return hard_decision(logits.template cast<float>());
}

template <typename T>
void Decoder<T>::state(nn::State<T>& s, const std::string& p) {
    conv_in_.state(s, nn::join(p, "conv_in"));
    for (std::size_t i = 0; i < down_.size(); ++i) {
        down_[i].state(s, nn::join(p, "down" + std::to_string(i)));
        if (i < bn_.size()) bn_[i].state(s, nn::join(p, "down" + std::to_string(i) + "_bn"));
    }
    fc1_.state(s, nn::join(p, "fc1"));
    fc2_.state(s, nn::join(p, "fc2"));
    fc3_.state(s, nn::join(p, "fc3"));
}

template <typename T>
template <typename U>
Decoder<U> Decoder<T>::cast() const {
    Decoder<U> out(cfg_, 0);
    auto dst = out.state();
    auto src = const_cast<Decoder*>(this)->state();
    nn::copy_state(dst, src);
    return out;
}

template class Encoder<float>;
template class Encoder<double>;
template class Decoder<float>;
template class Decoder<double>;
template Encoder<double> Encoder<float>::cast<double>() const;
template Encoder<float> Encoder<double>::cast<float>() const;
template Decoder<double> Decoder<float>::cast<double>() const;
template Decoder<float> Decoder<double>::cast<float>() const;

std::vector<Secret> hard_decision(const Tensor<float>& logits) {
    if (logits.shape.size() != 3 || logits.dim(2) != 2) throw ShapeError("hard_decision expects (N, L, 2)");
    const int nb = logits.dim(0), L = logits.dim(1);
    std::vector<Secret> out;
    out.reserve(nb);
    for (int b = 0; b < nb; ++b) {
        std::vector<int> bits(L);
        for (int i = 0; i < L; ++i) {
            const std::size_t o = (static_cast<std::size_t>(b) * L + i) * 2;
            bits[i] = logits[o + 1] > logits[o] ? 1 : 0;
        }
        out.emplace_back(std::move(bits));
    }
    return out;
}

double bit_accuracy(const Tensor<float>& logits, const std::vector<Secret>& secrets) {
    const auto dec = hard_decision(logits);
    if (dec.size() != secrets.size()) throw ShapeError("bit_accuracy: batch mismatch");
    long match = 0, total = 0;
    for (std::size_t b = 0; b < dec.size(); ++b) {
        total += secrets[b].size();
        match += secrets[b].size() - hamming(dec[b], secrets[b]);
    }
    return static_cast<double>(match) / static_cast<double>(total);
}

template <typename T>
Var<T> ce_loss(const Var<T>& logits, const std::vector<Secret>& secrets) {
    if (logits.shape().size() != 3 || logits.dim(2) != 2 || logits.dim(0) != static_cast<int>(secrets.size()))
        throw ShapeError("ce_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(secrets.size()) +
                         " secrets");
    const int nb = logits.dim(0), L = logits.dim(1);
    Tensor<T> onehot(logits.shape());
    for (int b = 0; b < nb; ++b) {
        if (secrets[b].size() != L) throw ShapeError("ce_loss: secret length mismatch");
        for (int i = 0; i < L; ++i) onehot[(static_cast<std::size_t>(b) * L + i) * 2 + secrets[b].bits[i]] = T(1);
    }
    const Var<T> lp = ag::log_softmax(logits);
    return ag::scale(ag::sum(ag::mul(lp, Var<T>(std::move(onehot)))), static_cast<T>(-1.0 / (nb * L)));
}

template <typename T>
Var<T> orth_loss(const Var<T>& deltas) {
    const int nb = deltas.dim(0);
    if (nb < 2) throw ShapeError("orth_loss needs at least two perturbations");
    const std::size_t d = deltas.size() / nb;
    const T* x = deltas.value().ptr();
    std::vector<T> norm(nb);
    for (int i = 0; i < nb; ++i) {
        T s = 0;
        for (std::size_t k = 0; k < d; ++k) s += x[i * d + k] * x[i * d + k];
        norm[i] = std::sqrt(s);
        if (!(norm[i] > T(0))) throw NumericError("orth_loss: zero perturbation");
    }
    std::vector<T> cos(static_cast<std::size_t>(nb) * nb);
    T total = 0;
    for (int i = 0; i < nb; ++i)
        for (int j = 0; j < nb; ++j) {
            T s = 0;
            for (std::size_t k = 0; k < d; ++k) s += x[i * d + k] * x[j * d + k];
            cos[i * nb + j] = s / (norm[i] * norm[j]);
            if (i != j) total += cos[i * nb + j];
        }
    const T inv = T(1) / static_cast<T>(nb * (nb - 1));
    return ag::make_result<T>(
        Tensor<T>({1}, {total * inv}), {deltas},
        [nb, d, inv, norm = std::move(norm), cos = std::move(cos)](ag::Node<T>& n) {
            const T* xv = n.inputs[0]->value.ptr();
            T* g = n.inputs[0]->grad_buffer().ptr();
            // Each unordered pair appears twice in the sum.
            const T up = T(2) * inv * n.grad[0];
            for (int i = 0; i < nb; ++i)
                for (int j = 0; j < nb; ++j) {
                    if (i == j) continue;
                    const T c = cos[i * nb + j];
                    for (std::size_t k = 0; k < d; ++k)
                        g[i * d + k] += up * (xv[j * d + k] / (norm[i] * norm[j]) - c * xv[i * d + k] / (norm[i] * norm[i]));
                }
        },
        "orth_loss");
}

template <typename T>
Var<T> mag_loss(const Var<T>& deltas, double sigma_target) {
    const int nb = deltas.dim(0);
    const Var<T> flat = ag::reshape(deltas, {nb, static_cast<int>(deltas.size() / nb)});
    const Var<T> var = ag::sub(ag::mean_rows(ag::square(flat)), ag::square(ag::mean_rows(flat)));
    // Tiny floor keeps the gradient finite at delta = 0.
    const Var<T> sd = ag::sqrt(ag::add_scalar(var, T(1e-12)));
    return ag::mean(ag::square(ag::add_scalar(sd, static_cast<T>(-sigma_target))));
}

template <typename T>
Var<T> kl_loss(const Var<T>& mu, const Var<T>& log_var) {
    const Var<T> inner = ag::sub(ag::sub(ag::add_scalar(log_var, T(1)), ag::square(mu)), ag::exp(log_var));
    return ag::scale(ag::mean(inner), T(-0.5));
}

#define DIFFMARK_INSTANTIATE_LOSSES(T)                                        \
    template Var<T> ce_loss(const Var<T>&, const std::vector<Secret>&);       \
    template Var<T> orth_loss(const Var<T>&);                                 \
    template Var<T> mag_loss(const Var<T>&, double);                          \
    template Var<T> kl_loss(const Var<T>&, const Var<T>&);

DIFFMARK_INSTANTIATE_LOSSES(float)
DIFFMARK_INSTANTIATE_LOSSES(double)

PretrainResult pretrain(Encoder<float>& enc, Decoder<float>& dec, const PretrainConfig& cfg) {
    if (cfg.batch < 2) throw ConfigError("pretrain: batch must be >= 2 for the orthogonality term");
    auto es = enc.state();
    auto ds = dec.state();
    nn::AdamW opt_e(es, {}), opt_d(ds, {});
    PretrainResult res;
    const int L = enc.config().bits;
    int streak = 0;
    for (long t = 1; t <= cfg.max_steps; ++t) {
        Rng rng = Rng::derive(cfg.seed, {0x9e7, static_cast<std::uint64_t>(t)});
        std::vector<Secret> secrets;
        for (int b = 0; b < cfg.batch; ++b) secrets.push_back(Secret::random(L, rng));
        const auto pert = enc(secrets, true, &rng, true);
        const double sigma = cfg.sigma_start + (cfg.sigma_end - cfg.sigma_start) * static_cast<double>(t) / cfg.max_steps;
        const Var<float> noise(rng.randn<float>(pert.delta.shape(), sigma));
        const Var<float> logits = dec(ag::concat<float>({pert.delta, ag::add(pert.delta, noise)}, 0), true);
        const Var<float> lc = ag::slice_rows(logits, 0, cfg.batch), ln = ag::slice_rows(logits, cfg.batch, cfg.batch);
        const Var<float> loss = ag::add(ag::add(ag::scale(ce_loss(lc, secrets), static_cast<float>(cfg.w_clean)),
                                                ag::scale(ce_loss(ln, secrets), static_cast<float>(cfg.w_noisy))),
                                        ag::scale(orth_loss(pert.delta), static_cast<float>(cfg.w_orth)));
        if (!std::isfinite(loss.item())) throw NumericError("pretrain loss is not finite at step " + std::to_string(t));
        nn::zero_grad(es);
        nn::zero_grad(ds);
        ag::backward(loss);
        opt_e.step(cfg.lr_encoder);
        opt_d.step(cfg.lr_decoder);
        res.loss_trace.push_back(loss.item());
        res.steps = t;
        res.clean_accuracy = bit_accuracy(lc.value(), secrets);
        res.noisy_accuracy = bit_accuracy(ln.value(), secrets);
        streak = res.clean_accuracy >= cfg.stop_accuracy ? streak + 1 : 0;
        if (streak >= cfg.stop_patience) {
            res.converged = true;
            break;
        }
    }
    nn::zero_grad(es);
    nn::zero_grad(ds);
    return res;
}

double mean_abs_cosine(Encoder<float>& enc, const std::vector<Secret>& secrets) {
    const int n = static_cast<int>(secrets.size());
    if (n < 2) throw ShapeError("mean_abs_cosine needs at least two secrets");
    std::vector<Tensor<float>> d;
    for (const auto& s : secrets) d.push_back(enc.delta(s));
    double acc = 0;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double dot = 0, ni = 0, nj = 0;
            for (std::size_t k = 0; k < d[i].size(); ++k) {
                dot += double(d[i][k]) * d[j][k];
                ni += double(d[i][k]) * d[i][k];
                nj += double(d[j][k]) * d[j][k];
            }
            acc += std::abs(dot / std::sqrt(ni * nj));
        }
    return acc / (n * (n - 1) / 2.0);
}

}  // namespace diffmark::codec

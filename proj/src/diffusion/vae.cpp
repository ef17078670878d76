#include "diffmark/diffusion/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "diffmark/diffusion/denoiser.hpp"
#include "diffmark/nn/optim.hpp"

namespace diffmark::diffusion {

ToyVAE::ToyVAE(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    const int w = cfg.width, c = cfg.image_channels, l = cfg.latent_channels;
    e1_ = nn::Conv2d<float>(rng, c, w / 2, 3, 1, 1);
    e2_ = nn::Conv2d<float>(rng, w / 2, w, 3, 2, 1);
    e3_ = nn::Conv2d<float>(rng, w, w, 3, 2, 1);
    e4_ = nn::Conv2d<float>(rng, w, w, 3, 1, 1);
    e_mu_ = nn::Conv2d<float>(rng, w, l, 3, 1, 1);
    e_logvar_ = nn::Conv2d<float>(rng, w, l, 3, 1, 1);
    d_in_ = nn::Conv2d<float>(rng, l, w, 3, 1, 1);
    d1_ = nn::Conv2d<float>(rng, w, w, 3, 1, 1);
    d2_ = nn::Conv2d<float>(rng, w, w, 3, 1, 1);
    d3_ = nn::Conv2d<float>(rng, w, w / 2, 3, 1, 1);
    d_out_ = nn::Conv2d<float>(rng, w / 2, c, 3, 1, 1);
}

ToyVAE ToyVAE::identity() {
    ToyVAE v;
    v.identity_ = true;
    v.trained_ = true;
    v.scale_factor_ = 1.0;
    return v;
}

void ToyVAE::require_ready() const {
    if (!identity_ && !trained_) throw StateError("ToyVAE used before training");
}

ToyVAE::Posterior ToyVAE::encode_raw(const Var<float>& x) const {
    Var<float> h = ag::silu(e1_(x));
    h = ag::silu(e2_(h));
    h = ag::silu(e3_(h));
    h = ag::add(h, ag::silu(e4_(h)));
    return {e_mu_(h), e_logvar_(h)};
}

Var<float> ToyVAE::decode_raw(const Var<float>& z) const {
    Var<float> h = ag::silu(d_in_(z));
    h = ag::add(h, ag::silu(d1_(h)));
    h = ag::silu(d2_(ag::upsample2x(h)));
    h = ag::silu(d3_(ag::upsample2x(h)));
    return d_out_(h);
}

Var<float> ToyVAE::encode(const Var<float>& x) const {
    require_ready();
    if (identity_) return ag::reshape(x, x.shape());
    return ag::scale(encode_raw(x).mu, static_cast<float>(scale_factor_));
}

Var<float> ToyVAE::decode(const Var<float>& z) const {
    require_ready();
    if (identity_) return ag::reshape(z, z.shape());
    return ag::clamp(decode_raw(ag::scale(z, static_cast<float>(1.0 / scale_factor_))), -1.0f, 1.0f);
}

Tensor<float> ToyVAE::encode(const Tensor<float>& x) const {
    ag::NoGradGuard ng;
    return encode(Var<float>(x)).value();
}

Tensor<float> ToyVAE::decode(const Tensor<float>& z) const {
    ag::NoGradGuard ng;
    return decode(Var<float>(z)).value();
}

void ToyVAE::state(nn::State<float>& s, const std::string& p) {
    if (identity_) return;
    e1_.state(s, nn::join(p, "enc.conv1"));
    e2_.state(s, nn::join(p, "enc.conv2"));
    e3_.state(s, nn::join(p, "enc.conv3"));
    e4_.state(s, nn::join(p, "enc.res"));
    e_mu_.state(s, nn::join(p, "enc.mu"));
    e_logvar_.state(s, nn::join(p, "enc.logvar"));
    d_in_.state(s, nn::join(p, "dec.conv_in"));
    d1_.state(s, nn::join(p, "dec.res"));
    d2_.state(s, nn::join(p, "dec.up1"));
    d3_.state(s, nn::join(p, "dec.up2"));
    d_out_.state(s, nn::join(p, "dec.out"));
}

double psnr(const float* a, const float* b, std::size_t n) {
    double mse = 0;
    for (std::size_t i = 0; i < n; ++i) mse += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    mse /= static_cast<double>(n);
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(4.0 / mse));
}

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape != b.shape) throw ShapeError("psnr: shape mismatch");
    return psnr(a.ptr(), b.ptr(), a.size());
}

VaeTrainResult train_vae(ToyVAE& vae, const Tensor<float>& images, const VaeTrainConfig& cfg) {
    if (vae.identity_mode()) throw StateError("identity VAE has nothing to train");
    VaeTrainResult res;
    const int n = images.dim(0);
    const int n_val = std::max(1, n / 10);
    const int n_train = n - n_val;
    if (n_train < cfg.batch) throw ConfigError("train_vae: dataset smaller than one batch");
    auto state = vae.state();
    nn::AdamW opt(state, {0.9, 0.999, 1e-8, 0.0});
    const long per_epoch = n_train / cfg.batch;
    const long total = per_epoch * cfg.epochs;
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng perm = Rng::derive(cfg.seed, {11, static_cast<std::uint64_t>(epoch)});
        std::vector<int> order(n_train);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), perm.engine());
        for (long b = 0; b < per_epoch; ++b, ++step) {
            Rng rng = Rng::derive(cfg.seed, {12, static_cast<std::uint64_t>(step)});
            std::vector<int> idx(order.begin() + b * cfg.batch, order.begin() + (b + 1) * cfg.batch);
            Var<float> x(gather_rows(images, idx));
            auto post = vae.encode_raw(x);
            Var<float> eta(rng.randn<float>(post.mu.shape()));
            Var<float> z = ag::add(post.mu, ag::mul(ag::exp(ag::scale(post.logvar, 0.5f)), eta));
            Var<float> rec = ag::mean(ag::square(ag::sub(vae.decode_raw(z), x)));
            Var<float> kl = ag::scale(
                ag::mean(ag::sub(ag::add(ag::square(post.mu), ag::exp(post.logvar)), ag::add_scalar(post.logvar, 1.0f))),
                0.5f);
            Var<float> loss = ag::add(rec, ag::scale(kl, static_cast<float>(cfg.kl_weight)));
            if (!std::isfinite(loss.item())) {
                std::ostringstream tr;
                for (double l : res.loss_trace) tr << l << "\n";
                throw TrainingError("VAE loss became non-finite at step " + std::to_string(step), tr.str());
            }
            nn::zero_grad(state);
            ag::backward(loss);
            nn::clip_grad_norm(state, 1.0);
            opt.step(nn::warmup_linear_lr(step, std::min<long>(100, total / 10), total, cfg.lr, cfg.lr * 0.05));
            res.loss_trace.push_back(rec.item());
        }
    }
    nn::zero_grad(state);

    ag::NoGradGuard ng;
    double s = 0, sq = 0;
    std::size_t count = 0;
    for (int b = 0; b < n_train; b += 64) {
        const int c = std::min(64, n_train - b);
        const Tensor<float> mu = vae.encode_raw(Var<float>(slice_batch(images, b, c))).mu.value();
        for (float v : mu.data) {
            s += v;
            sq += double(v) * v;
        }
        count += mu.size();
    }
    const double mean = s / count;
    const double stdev = std::sqrt(std::max(sq / count - mean * mean, 1e-12));
    vae.mark_trained(1.0 / stdev);
    res.scale_factor = 1.0 / stdev;

    const Tensor<float> val = slice_batch(images, n_train, n_val);
    const Tensor<float> rt = vae.decode(vae.encode(val));
    res.val_psnr = psnr(val, rt);
    if (res.val_psnr < cfg.psnr_floor) {
        std::ostringstream tr;
        for (double l : res.loss_trace) tr << l << "\n";
        throw TrainingError("VAE held-out PSNR " + std::to_string(res.val_psnr) + " dB below floor " +
                                std::to_string(cfg.psnr_floor),
                            tr.str());
    }
    return res;
}

}  // namespace diffmark::diffusion

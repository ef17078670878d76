#include "diffmark/attacks/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "diffmark/io/image.hpp"
#include "diffmark/nn/optim.hpp"

namespace diffmark::attacks {

namespace {

constexpr int kPgdIters = 50;

void check_images(const Tensor<float>& x) {
    if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("attack: expected (N, 3, H, W), got " + shape_str(x.shape));
}

float clamp1(double v) { return static_cast<float>(std::clamp(v, -1.0, 1.0)); }

// Bilinear sample of one channel plane at (y, x); outside the image gives `fill`.
double sample(const float* plane, int h, int w, double y, double x, double fill) {
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    double acc = 0;
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            const int yy = y0 + dy, xx = x0 + dx;
            const double wgt = (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
            if (wgt == 0) continue;
            acc += wgt * (yy >= 0 && yy < h && xx >= 0 && xx < w ? plane[yy * w + xx] : fill);
        }
    return acc;
}

void rotate(const float* in, float* out, int h, int w, double degrees) {
    const double th = degrees * std::numbers::pi / 180.0, c = std::cos(th), s = std::sin(th);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                // Inverse map of a counter-clockwise rotation; corners fill black.
                const double dx = x - cx, dy = y - cy;
                const double sx = c * dx - s * dy + cx, sy = s * dx + c * dy + cy;
                out[(ch * h + y) * w + x] = clamp1(sample(in + ch * h * w, h, w, sy, sx, -1.0));
            }
}

// Crop of `ch` x `cw` at (top, left) resized back to h x w (half-pixel centres).
void crop_resize(const float* in, float* out, int h, int w, int top, int left, int ch, int cw) {
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double sy = std::clamp((y + 0.5) * ch / h - 0.5, 0.0, ch - 1.0) + top;
                const double sx = std::clamp((x + 0.5) * cw / w - 0.5, 0.0, cw - 1.0) + left;
                out[(c * h + y) * w + x] = clamp1(sample(in + c * h * w, h, w, sy, sx, 0.0));
            }
}

std::vector<double> gaussian_kernel(int k) {
    const double sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8;
    std::vector<double> g(k);
    double s = 0;
    for (int i = 0; i < k; ++i) {
        const double d = i - (k - 1) / 2.0;
        g[i] = std::exp(-d * d / (2 * sigma * sigma));
        s += g[i];
    }
    for (auto& v : g) v /= s;
    return g;
}

int reflect(int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
}

void blur(const float* in, float* out, int h, int w, int k) {
    const auto g = gaussian_kernel(k);
    const int r = k / 2;
    std::vector<double> tmp(h * w);
    for (int c = 0; c < 3; ++c) {
        const float* p = in + c * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double a = 0;
                for (int i = 0; i < k; ++i) a += g[i] * p[y * w + reflect(x + i - r, w)];
                tmp[y * w + x] = a;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double a = 0;
                for (int i = 0; i < k; ++i) a += g[i] * tmp[reflect(y + i - r, h) * w + x];
                out[(c * h + y) * w + x] = clamp1(a);
            }
    }
}

Tensor<float> image_of(const Tensor<float>& x, int n) {
    const int h = x.dim(2), w = x.dim(3);
    Tensor<float> img({3, h, w});
    std::copy(x.ptr() + static_cast<std::size_t>(n) * 3 * h * w, x.ptr() + static_cast<std::size_t>(n + 1) * 3 * h * w,
              img.data.begin());
    return img;
}

// Partial re-denoise from step index t (t* - 1) to the clean end, unconditionally.
Tensor<float> redenoise(const Tensor<float>& z0, int t_star, Rng& rng, const AttackContext& ctx) {
    if (t_star <= 0) return z0;
    const auto& sched = ctx.schedule;
    const int t0 = t_star - 1;
    const Tensor<float> eps = rng.randn<float>(z0.shape);
    Tensor<float> z = diffusion::forward_diffuse(z0, t0, eps, sched);
    const int steps = std::max(1, (t_star + 19) / 20);
    std::vector<int> ts(steps);
    for (int i = 0; i < steps; ++i) ts[i] = t0 - static_cast<int>(static_cast<long>(i) * t_star / steps);
    const std::vector<int> labels(z0.dim(0), ctx.denoiser->null_label());
    for (int i = 0; i < steps; ++i) {
        const int t = ts[i], tp = i + 1 < steps ? ts[i + 1] : diffusion::kTerminal;
        const Tensor<float> e = diffusion::cfg_predict(*ctx.denoiser, z, t, labels, {1.0});
        z = diffusion::ddim_step(z, e, t, tp, sched);
    }
    return z;
}

}  // namespace

const std::vector<AttackKind>& all_kinds() {
    static const std::vector<AttackKind> k{AttackKind::rotation,    AttackKind::rcrop,       AttackKind::erase,
                                           AttackKind::bright,      AttackKind::contrast,    AttackKind::blur,
                                           AttackKind::noise,       AttackKind::jpeg,        AttackKind::regen_vae,
                                           AttackKind::regen_diff,  AttackKind::rinse_2xdiff, AttackKind::adv_klvae,
                                           AttackKind::adv_rn_surrogate};
    return k;
}

std::string to_string(AttackKind k) { return nlohmann::json(k).get<std::string>(); }

AttackKind parse_kind(const std::string& s) {
    for (auto k : all_kinds())
        if (to_string(k) == s) return k;
    throw ConfigError("unknown attack kind '" + s + "'");
}

Category category(AttackKind k) {
    switch (k) {
        case AttackKind::rotation:
        case AttackKind::rcrop:
        case AttackKind::erase: return Category::geometric;
        case AttackKind::bright:
        case AttackKind::contrast: return Category::photometric;
        case AttackKind::blur:
        case AttackKind::noise:
        case AttackKind::jpeg: return Category::degradation;
        case AttackKind::regen_vae:
        case AttackKind::regen_diff:
        case AttackKind::rinse_2xdiff: return Category::regeneration;
        default: return Category::adversarial;
    }
}

std::string to_string(Category c) {
    switch (c) {
        case Category::geometric: return "geometric";
        case Category::photometric: return "photometric";
        case Category::degradation: return "degradation";
        case Category::regeneration: return "regeneration";
        default: return "adversarial";
    }
}

StrengthRange strength_range(AttackKind k) {
    auto r = [](double benign, double strongest, bool id) {
        return StrengthRange{benign, strongest, id, std::min(benign, strongest), std::max(benign, strongest)};
    };
    switch (k) {
        case AttackKind::rotation: return r(0, 45, true);
        case AttackKind::rcrop: return r(1.0, 0.5, true);
        case AttackKind::erase: return r(0, 0.25, true);
        case AttackKind::bright: return r(1, 2, true);
        case AttackKind::contrast: return r(1, 2, true);
        case AttackKind::blur: return r(0, 20, true);
        case AttackKind::noise: return r(0, 0.1, true);
        case AttackKind::jpeg: return r(90, 10, false);
        case AttackKind::regen_vae: return r(7, 1, false);
        case AttackKind::regen_diff: {
            auto s = r(40, 200, false);
            s.accept_lo = 0;
            return s;
        }
        case AttackKind::rinse_2xdiff: {
            auto s = r(20, 100, false);
            s.accept_lo = 0;
            return s;
        }
        default: return r(0, 8, true);
    }
}

std::vector<double> sweep_strengths(AttackKind k, int n) {
    if (n < 2) throw RangeError("sweep needs at least two strengths");
    const auto r = strength_range(k);
    std::vector<double> s(n);
    for (int i = 0; i < n; ++i) s[i] = r.benign + (r.strongest - r.benign) * i / (n - 1);
    return s;
}

void check_strength(const AttackSpec& spec) {
    const auto r = strength_range(spec.kind);
    if (!(spec.strength >= r.accept_lo && spec.strength <= r.accept_hi))
        throw RangeError("attack " + to_string(spec.kind) + ": strength " + std::to_string(spec.strength) +
                         " outside [" + std::to_string(r.accept_lo) + ", " + std::to_string(r.accept_hi) + "]");
}

Tensor<float> apply_distortion(const Tensor<float>& x, const AttackSpec& spec) {
    check_images(x);
    if (category(spec.kind) != Category::geometric && category(spec.kind) != Category::photometric &&
        category(spec.kind) != Category::degradation)
        throw PreconditionError("apply_distortion: " + to_string(spec.kind) + " is not a distortion");
    check_strength(spec);
    const auto range = strength_range(spec.kind);
    if (range.identity_at_benign && spec.strength == range.benign) return x;
    const int N = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t per = static_cast<std::size_t>(3) * h * w;
    Tensor<float> out(x.shape);
    const double s = spec.strength;
    for (int n = 0; n < N; ++n) {
        Rng rng = Rng::derive(spec.seed, {static_cast<std::uint64_t>(spec.kind), static_cast<std::uint64_t>(n)});
        const float* in = x.ptr() + n * per;
        float* o = out.ptr() + n * per;
        switch (spec.kind) {
            case AttackKind::rotation: rotate(in, o, h, w, s); break;
            case AttackKind::rcrop: {
                const double side = std::sqrt(s);
                const int ch = std::max(1, static_cast<int>(std::lround(h * side)));
                const int cw = std::max(1, static_cast<int>(std::lround(w * side)));
                const int top = rng.randint(h - ch + 1), left = rng.randint(w - cw + 1);
                crop_resize(in, o, h, w, top, left, ch, cw);
                break;
            }
            case AttackKind::erase: {
                std::copy(in, in + per, o);
                const int side = static_cast<int>(std::lround(std::sqrt(s * h * w)));
                if (side == 0) break;
                const int eh = std::min(side, h), ew = std::min(w, static_cast<int>(std::lround(s * h * w / eh)));
                const int top = rng.randint(h - eh + 1), left = rng.randint(w - ew + 1);
                for (int c = 0; c < 3; ++c)
                    for (int y = top; y < top + eh; ++y)
                        for (int xx = left; xx < left + ew; ++xx) o[(c * h + y) * w + xx] = 0.0f;
                break;
            }
            case AttackKind::bright:
                for (std::size_t i = 0; i < per; ++i) o[i] = clamp1(((in[i] + 1.0) / 2.0 * s) * 2.0 - 1.0);
                break;
            case AttackKind::contrast: {
                double mean = 0;
                for (int p = 0; p < h * w; ++p)
                    mean += 0.299 * in[p] + 0.587 * in[h * w + p] + 0.114 * in[2 * h * w + p];
                mean /= h * w;
                for (std::size_t i = 0; i < per; ++i) o[i] = clamp1(mean + s * (in[i] - mean));
                break;
            }
            case AttackKind::blur: {
                int k = static_cast<int>(std::lround(s));
                if (k <= 1) {
                    std::copy(in, in + per, o);
                    break;
                }
                if (k % 2 == 0) ++k;
                blur(in, o, h, w, k);
                break;
            }
            case AttackKind::noise:
                // Sigma in [0, 1] pixel units is 2 sigma in [-1, 1] units.
                for (std::size_t i = 0; i < per; ++i) o[i] = clamp1(in[i] + 2.0 * s * rng.normal());
                break;
            case AttackKind::jpeg: {
                const Tensor<float> r = io::jpeg_roundtrip(image_of(x, n), static_cast<int>(std::lround(s)));
                std::copy(r.data.begin(), r.data.end(), o);
                break;
            }
            default: break;
        }
    }
    return out;
}

Tensor<float> apply_regeneration(const Tensor<float>& x, const AttackSpec& spec, const AttackContext& ctx) {
    check_images(x);
    if (category(spec.kind) != Category::regeneration)
        throw PreconditionError("apply_regeneration: " + to_string(spec.kind) + " is not a regeneration attack");
    check_strength(spec);
    if (!ctx.vae) throw PreconditionError("regeneration attacks need the VAE");
    Rng rng = Rng::derive(spec.seed, {static_cast<std::uint64_t>(spec.kind)});
    if (spec.kind == AttackKind::regen_vae) {
        // Quality 7 is a plain round-trip; each level below adds latent noise.
        Tensor<float> z = ctx.vae->encode(x);
        const double sigma = (7.0 - spec.strength) / 6.0;
        for (auto& v : z.data) v += static_cast<float>(sigma * rng.normal());
        return ctx.vae->decode(z);
    }
    if (!ctx.denoiser) throw PreconditionError("diffusion regeneration needs the denoiser");
    if (spec.kind == AttackKind::rinse_2xdiff) {
        // Two regen_diff passes at the rinse strength; the second uses seed + 1.
        const AttackSpec first{AttackKind::regen_diff, spec.strength, spec.seed};
        const AttackSpec second{AttackKind::regen_diff, spec.strength, spec.seed + 1};
        return apply_regeneration(apply_regeneration(x, first, ctx), second, ctx);
    }
    const int t_star = static_cast<int>(std::lround(spec.strength));
    return ctx.vae->decode(redenoise(ctx.vae->encode(x), t_star, rng, ctx));
}

Tensor<float> pgd_linf(const Tensor<float>& x, double eps, const FeatureFn& feature, int iters, std::uint64_t seed) {
    if (eps == 0.0) return x;
    Rng rng = Rng::derive(seed, {0xad7});
    const float e = static_cast<float>(eps);
    const Tensor<float> target = [&] {
        ag::NoGradGuard ng;
        return feature(Var<float>(x)).value();
    }();
    auto project = [&](Tensor<float>& a) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            const float lo = std::max(-1.0f, x[i] - e), hi = std::min(1.0f, x[i] + e);
            a[i] = std::clamp(a[i], lo, hi);
        }
    };
    Tensor<float> adv = x;
    for (auto& v : adv.data) v += static_cast<float>(rng.uniform(-eps, eps));
    project(adv);
    const float step = e / 10.0f;
    for (int it = 0; it < iters; ++it) {
        Var<float> a(adv, true);
        const Var<float> f = feature(a);
        const Var<float> loss = ag::sum(ag::square(ag::sub(f, Var<float>(target))));
        ag::backward(loss);
        const Tensor<float>& g = a.grad();
        for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += step * (g[i] > 0 ? 1.0f : (g[i] < 0 ? -1.0f : 0.0f));
        project(adv);
    }
    return adv;
}

Tensor<float> apply_adversarial(const Tensor<float>& x, const AttackSpec& spec, const AttackContext& ctx) {
    check_images(x);
    if (category(spec.kind) != Category::adversarial)
        throw PreconditionError("apply_adversarial: " + to_string(spec.kind) + " is not an adversarial attack");
    check_strength(spec);
    // Epsilon is quoted in 1/255 of the [0, 1] range; images live in [-1, 1].
    const double eps = 2.0 * spec.strength / 255.0;
    if (spec.kind == AttackKind::adv_klvae) {
        if (!ctx.vae) throw PreconditionError("adv_klvae needs the VAE");
        return pgd_linf(x, eps, [&](const Var<float>& a) { return ctx.vae->encode(a); }, kPgdIters, spec.seed);
    }
    if (!ctx.surrogate) throw PreconditionError("adv_rn_surrogate needs the surrogate classifier");
    return pgd_linf(x, eps, [&](const Var<float>& a) { return ctx.surrogate->features(a); }, kPgdIters, spec.seed);
}

Tensor<float> apply(const Tensor<float>& x, const AttackSpec& spec, const AttackContext& ctx) {
    switch (category(spec.kind)) {
        case Category::regeneration: return apply_regeneration(x, spec, ctx);
        case Category::adversarial: return apply_adversarial(x, spec, ctx);
        default: return apply_distortion(x, spec);
    }
}

std::vector<double> feature_divergence(const Tensor<float>& a, const Tensor<float>& b, AttackKind adv,
                                       const AttackContext& ctx) {
    ag::NoGradGuard ng;
    Tensor<float> fa, fb;
    if (adv == AttackKind::adv_klvae) {
        fa = ctx.vae->encode(a);
        fb = ctx.vae->encode(b);
    } else {
        fa = ctx.surrogate->features(Var<float>(a)).value();
        fb = ctx.surrogate->features(Var<float>(b)).value();
    }
    const int N = fa.dim(0);
    const std::size_t per = fa.size() / N;
    std::vector<double> d(N);
    for (int n = 0; n < N; ++n) {
        double s = 0;
        for (std::size_t i = n * per; i < (n + 1) * per; ++i) s += double(fa[i] - fb[i]) * (fa[i] - fb[i]);
        d[n] = std::sqrt(s);
    }
    return d;
}

Surrogate::Surrogate(int classes, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, {0x5u});
    c1_ = nn::Conv2d<float>(rng, 3, 16, 3, 1, 1);
    c2_ = nn::Conv2d<float>(rng, 16, 32, 4, 2, 1);
    c3_ = nn::Conv2d<float>(rng, 32, 64, 4, 2, 1);
    c4_ = nn::Conv2d<float>(rng, 64, 64, 4, 2, 1);
    head_ = nn::Linear<float>(rng, 64, classes);
}

Var<float> Surrogate::features(const Var<float>& x) const {
    Var<float> h = ag::silu(c1_(x));
    h = ag::silu(c2_(h));
    h = ag::silu(c3_(h));
    h = ag::silu(c4_(h));
    const int N = h.dim(0), C = h.dim(1);
    return ag::reshape(ag::mean_rows(ag::reshape(h, {N * C, h.dim(2) * h.dim(3)})), {N, C});
}

Var<float> Surrogate::logits(const Var<float>& x) const { return head_(features(x)); }

nn::State<float> Surrogate::state() {
    nn::State<float> s;
    c1_.state(s, "conv1");
    c2_.state(s, "conv2");
    c3_.state(s, "conv3");
    c4_.state(s, "conv4");
    head_.state(s, "head");
    return s;
}

double train_surrogate(Surrogate& model, const Tensor<float>& images, const std::vector<int>& labels,
                       const SurrogateTrainConfig& cfg) {
    check_images(images);
    const int N = images.dim(0);
    if (static_cast<int>(labels.size()) != N) throw ShapeError("train_surrogate: label count differs");
    const int val = std::max(1, N / 10), train = N - val;
    auto st = model.state();
    nn::AdamW opt(st, {});
    Rng rng = Rng::derive(cfg.seed, {0x5ce});
    std::vector<int> order(train);
    for (int i = 0; i < train; ++i) order[i] = i;
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        for (int start = 0; start + cfg.batch <= train; start += cfg.batch) {
            const std::vector<int> idx(order.begin() + start, order.begin() + start + cfg.batch);
            const Tensor<float> xb = diffusion::gather_rows(images, idx);
            const Var<float> lp = ag::log_softmax(model.logits(Var<float>(xb)));
            const int out_classes = lp.dim(1);
            Tensor<float> onehot({cfg.batch, out_classes});
            for (int b = 0; b < cfg.batch; ++b) onehot[b * out_classes + labels[idx[b]]] = 1.0f;
            const Var<float> loss = ag::scale(ag::sum(ag::mul(lp, Var<float>(onehot))), -1.0f / cfg.batch);
            nn::zero_grad(st);
            ag::backward(loss);
            opt.step(cfg.lr);
        }
    }
    ag::NoGradGuard ng;
    std::vector<int> vidx(val);
    for (int i = 0; i < val; ++i) vidx[i] = train + i;
    const Tensor<float> lg = model.logits(Var<float>(diffusion::gather_rows(images, vidx))).value();
    const int C = lg.dim(1);
    int ok = 0;
    for (int i = 0; i < val; ++i) {
        const float* row = lg.ptr() + i * C;
        ok += static_cast<int>(std::max_element(row, row + C) - row) == labels[train + i];
    }
    return static_cast<double>(ok) / val;
}

}  // namespace diffmark::attacks

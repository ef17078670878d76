#include "diffmark/pipeline/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "diffmark/core/errors.hpp"

namespace diffmark::pipeline {

namespace {

constexpr int kChunk = 64;

void append_batch(Tensor<float>& out, const Tensor<float>& part) {
    if (out.size() == 0) {
        out = part;
        return;
    }
    out.data.insert(out.data.end(), part.data.begin(), part.data.end());
    out.shape[0] += part.shape[0];
}

void check_geometry(const codec::CodecConfig& c, const diffusion::ToyDenoiser<float>& den,
                    const diffusion::ToyVAE& vae) {
    if (c.latent_channels != vae.config().latent_channels || c.latent_channels != den.config().latent_channels)
        throw ShapeError("codec latent channels " + std::to_string(c.latent_channels) +
                         " do not match the frozen models");
    if (c.latent_size * 4 != 32) throw ShapeError("codec latent size " + std::to_string(c.latent_size) +
                                                  " does not match the 4x VAE on 32x32 images");
}

void check_secrets(const std::vector<Secret>& s, int L) {
    for (const auto& k : s)
        if (k.size() != L) throw ShapeError("secret of length " + std::to_string(k.size()) + ", codec expects " +
                                            std::to_string(L));
}

std::vector<int> labels_of(const std::vector<EmbedRequest>& reqs, int classes) {
    std::vector<int> l;
    for (const auto& r : reqs) {
        if (r.label < 0 || r.label >= classes) throw RangeError("embed: label " + std::to_string(r.label) + " out of range");
        l.push_back(r.label);
    }
    return l;
}

Embedded sample(const std::vector<EmbedRequest>& reqs, const diffusion::ToyDenoiser<float>& den,
                const diffusion::ToyVAE& vae, const codec::CodecConfig& geo, const EmbedConfig& cfg,
                const Tensor<float>* deltas) {
    if (reqs.empty()) throw PreconditionError("embed: no requests");
    if (cfg.ddim_steps < 1) throw ConfigError("embed: ddim_steps must be positive");
    const auto sched = diffusion::NoiseSchedule::linear();
    const double f = training::injection_factor(cfg.injection, cfg.ddim_steps);
    const Tensor<float> zT = initial_noise(reqs, geo);
    const auto labels = labels_of(reqs, den.config().num_classes);
    Embedded out;
    for (int s = 0; s < static_cast<int>(reqs.size()); s += kChunk) {
        const int n = std::min<int>(kChunk, static_cast<int>(reqs.size()) - s);
        const std::vector<int> lab(labels.begin() + s, labels.begin() + s + n);
        Tensor<float> d;
        if (deltas) d = diffusion::slice_batch(*deltas, s, n);
        const auto z0 = diffusion::ddim_sample(den, sched, cfg.ddim_steps, lab, {cfg.guidance},
                                               diffusion::slice_batch(zT, s, n), deltas ? &d : nullptr, f);
        append_batch(out.latents, z0);
        append_batch(out.images, vae.decode(z0));
    }
    return out;
}

}  // namespace

Tensor<float> initial_noise(const std::vector<EmbedRequest>& reqs, const codec::CodecConfig& g) {
    const int per = g.latent_channels * g.latent_size * g.latent_size;
    Tensor<float> z({static_cast<int>(reqs.size()), g.latent_channels, g.latent_size, g.latent_size});
    for (std::size_t i = 0; i < reqs.size(); ++i) {
        Rng rng = Rng::derive(reqs[i].seed, {0x7a54});
        for (int j = 0; j < per; ++j) z[i * per + j] = static_cast<float>(rng.normal());
    }
    return z;
}

Embedded embed(const std::vector<EmbedRequest>& reqs, codec::Encoder<float>& enc,
               const diffusion::ToyDenoiser<float>& den, const diffusion::ToyVAE& vae, const EmbedConfig& cfg) {
    const auto& geo = enc.config();
    check_geometry(geo, den, vae);
    std::vector<Secret> secrets;
    for (const auto& r : reqs) secrets.push_back(r.secret);
    check_secrets(secrets, geo.bits);
    const int per = geo.latent_channels * geo.latent_size * geo.latent_size;
    Tensor<float> deltas({static_cast<int>(reqs.size()), geo.latent_channels, geo.latent_size, geo.latent_size});
    for (std::size_t i = 0; i < reqs.size(); ++i) {
        const auto d = enc.delta(reqs[i].secret);
        std::copy(d.data.begin(), d.data.end(), deltas.data.begin() + i * per);
    }
    return sample(reqs, den, vae, geo, cfg, &deltas);
}

Embedded generate_clean(const std::vector<EmbedRequest>& reqs, const diffusion::ToyDenoiser<float>& den,
                        const diffusion::ToyVAE& vae, const codec::CodecConfig& geometry, const EmbedConfig& cfg) {
    check_geometry(geometry, den, vae);
    return sample(reqs, den, vae, geometry, cfg, nullptr);
}

std::vector<Secret> detect_latents(const Tensor<float>& latents, codec::Decoder<float>& dec) {
    const auto& g = dec.config();
    if (latents.shape.size() != 4 || latents.dim(1) != g.latent_channels || latents.dim(2) != g.latent_size ||
        latents.dim(3) != g.latent_size)
        throw ShapeError("detect: latent " + shape_str(latents.shape) + " does not match the decoder");
    std::vector<Secret> out;
    for (int s = 0; s < latents.dim(0); s += kChunk * 4) {
        const int n = std::min(kChunk * 4, latents.dim(0) - s);
        const auto part = dec.decode(diffusion::slice_batch(latents, s, n));
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

std::vector<Detection> detect(const Tensor<float>& images, codec::Decoder<float>& dec, const diffusion::ToyVAE& vae,
                              const std::optional<ident::DetectionThreshold>& threshold,
                              const std::vector<Secret>& registered) {
    if (images.shape.size() != 4 || images.dim(1) != 3) throw ShapeError("detect: expected (N, 3, H, W) images");
    if (!registered.empty() && registered.size() != 1 && static_cast<int>(registered.size()) != images.dim(0))
        throw ShapeError("detect: registered keys must be one or one per image");
    check_secrets(registered, dec.config().bits);
    if (threshold && threshold->L != dec.config().bits)
        throw ShapeError("detect: threshold computed for a different key length");
    Tensor<float> z;
    for (int s = 0; s < images.dim(0); s += kChunk * 4) {
        const int n = std::min(kChunk * 4, images.dim(0) - s);
        append_batch(z, vae.encode(diffusion::slice_batch(images, s, n)));
    }
    const auto decoded = detect_latents(z, dec);
    std::vector<Detection> out;
    for (std::size_t i = 0; i < decoded.size(); ++i) {
        Detection d{decoded[i], -1, std::nullopt};
        if (!registered.empty()) {
            const auto& key = registered.size() == 1 ? registered[0] : registered[i];
            d.matches = key.size() - codec::hamming(decoded[i], key);
            if (threshold) d.decision = threshold->detect(d.matches);
        }
        out.push_back(std::move(d));
    }
    return out;
}

std::vector<double> per_image_ber(const std::vector<Secret>& decoded, const std::vector<Secret>& truth) {
    if (decoded.size() != truth.size()) throw ShapeError("per_image_ber: count mismatch");
    std::vector<double> b;
    for (std::size_t i = 0; i < decoded.size(); ++i) {
        if (decoded[i].size() != truth[i].size()) throw ShapeError("per_image_ber: length mismatch");
        b.push_back(static_cast<double>(codec::hamming(decoded[i], truth[i])) / truth[i].size());
    }
    return b;
}

double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

RoundTrip round_trip(const std::vector<EmbedRequest>& reqs, codec::Encoder<float>& enc, codec::Decoder<float>& dec,
                     const diffusion::ToyDenoiser<float>& den, const diffusion::ToyVAE& vae, const EmbedConfig& cfg) {
    std::vector<Secret> truth;
    for (const auto& r : reqs) truth.push_back(r.secret);
    auto secrets_of = [](const std::vector<Detection>& d) {
        std::vector<Secret> s;
        for (const auto& x : d) s.push_back(x.secret);
        return s;
    };
    const auto e = embed(reqs, enc, den, vae, cfg);
    const auto clean = generate_clean(reqs, den, vae, enc.config(), cfg);
    RoundTrip r;
    r.latent_bit_acc = 1.0 - mean(per_image_ber(detect_latents(e.latents, dec), truth));
    r.image_bit_acc = 1.0 - mean(per_image_ber(secrets_of(detect(e.images, dec, vae)), truth));
    r.clean_ber = mean(per_image_ber(secrets_of(detect(clean.images, dec, vae)), truth));
    return r;
}

std::vector<SweepRow> attack_sweep(const Tensor<float>& watermarked, const std::vector<Secret>& secrets,
                                   codec::Decoder<float>& dec, const diffusion::ToyVAE& vae,
                                   const attacks::AttackContext& ctx, const std::vector<attacks::AttackKind>& kinds,
                                   int levels, double fpr, std::uint64_t seed) {
    if (static_cast<int>(secrets.size()) != watermarked.dim(0)) throw ShapeError("attack_sweep: one secret per image");
    if (levels < 2) throw ConfigError("attack_sweep: need at least two strength levels");
    const auto thr = ident::compute_threshold(dec.config().bits, fpr);
    std::vector<SweepRow> rows;
    for (auto k : kinds) {
        const auto strengths = attacks::sweep_strengths(k, levels);
        for (std::size_t li = 0; li < strengths.size(); ++li) {
            const attacks::AttackSpec spec{k, strengths[li], seed * 1000003 + static_cast<std::uint64_t>(k) * 101 + li};
            const auto attacked = attacks::apply(watermarked, spec, ctx);
            const auto det = detect(attacked, dec, vae, thr, secrets);
            SweepRow r;
            r.kind = k;
            r.strength = strengths[li];
            std::vector<Secret> got;
            long hits = 0;
            for (const auto& d : det) {
                got.push_back(d.secret);
                hits += *d.decision;
            }
            r.ber = per_image_ber(got, secrets);
            r.mean_ber = mean(r.ber);
            r.bit_acc = 1.0 - r.mean_ber;
            r.psnr = diffusion::psnr(attacked, watermarked);
            r.tpr = static_cast<double>(hits) / static_cast<double>(det.size());
            rows.push_back(std::move(r));
        }
    }
    return rows;
}

std::string sweep_csv_header() { return "kind,strength,ber,bit_acc,psnr,tpr,config_hash"; }

std::string sweep_csv_row(const SweepRow& r, const std::string& config_hash) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.6g,%.6f,%.6f,%.4f,%.6f,%s", attacks::to_string(r.kind).c_str(), r.strength,
                  r.mean_ber, r.bit_acc, r.psnr, r.tpr, config_hash.c_str());
    return buf;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
    if (x.size() < 2) return 0.0;
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double mx = mean(rx), my = mean(ry);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

Interval spearman_bootstrap(const std::vector<SweepRow>& rows, int resamples, double level, std::uint64_t seed) {
    if (rows.size() < 2) throw PreconditionError("spearman_bootstrap: need at least two levels");
    const std::size_t n = rows[0].ber.size();
    for (const auto& r : rows)
        if (r.kind != rows[0].kind || r.ber.size() != n) throw PreconditionError("spearman_bootstrap: mixed rows");
    if (n == 0 || resamples < 1 || !(level > 0 && level < 1)) throw ConfigError("spearman_bootstrap: bad arguments");
    // Strength is oriented benign -> strongest, so rising BER gives rho > 0.
    std::vector<double> x(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) x[i] = static_cast<double>(i);
    std::vector<double> y(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) y[i] = rows[i].mean_ber;
    Interval out;
    out.estimate = spearman(x, y);
    Rng rng(seed);
    std::vector<double> rhos;
    std::vector<std::size_t> pick(n);
    for (int b = 0; b < resamples; ++b) {
        for (auto& p : pick) p = static_cast<std::size_t>(rng.randint(static_cast<int>(n)));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            double s = 0;
            for (auto p : pick) s += rows[i].ber[p];
            y[i] = s / static_cast<double>(n);
        }
        rhos.push_back(spearman(x, y));
    }
    std::sort(rhos.begin(), rhos.end());
    const double a = (1.0 - level) / 2.0;
    auto q = [&](double p) {
        const double pos = p * static_cast<double>(rhos.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, rhos.size() - 1);
        return rhos[lo] + (pos - static_cast<double>(lo)) * (rhos[hi] - rhos[lo]);
    };
    out.lo = q(a);
    out.hi = q(1.0 - a);
    return out;
}

std::vector<TransferRow> transfer_eval(codec::Encoder<float>& enc, codec::Decoder<float>& dec,
                                       const diffusion::ToyVAE& vae, const std::vector<TransferTarget>& targets,
                                       const std::vector<EmbedRequest>& reqs, const EmbedConfig& cfg,
                                       const std::vector<attacks::AttackSpec>& atk, const attacks::AttackContext& ctx,
                                       double fpr) {
    std::vector<Secret> secrets;
    for (const auto& r : reqs) secrets.push_back(r.secret);
    const auto thr = ident::compute_threshold(dec.config().bits, fpr);
    std::vector<TransferRow> out;
    for (const auto& t : targets) {
        if (!t.denoiser) throw PreconditionError("transfer_eval: target " + t.name + " has no denoiser");
        const auto e = embed(reqs, enc, *t.denoiser, vae, cfg);
        TransferRow row;
        row.model = t.name;
        row.latent_bit_acc = 1.0 - mean(per_image_ber(detect_latents(e.latents, dec), secrets));
        std::vector<Secret> got;
        for (const auto& d : detect(e.images, dec, vae)) got.push_back(d.secret);
        row.bit_acc = 1.0 - mean(per_image_ber(got, secrets));
        for (const auto& spec : atk) {
            long hits = 0;
            for (const auto& d : detect(attacks::apply(e.images, spec, ctx), dec, vae, thr, secrets)) hits += *d.decision;
            row.attack_tpr.emplace_back(spec.kind, static_cast<double>(hits) / static_cast<double>(reqs.size()));
        }
        out.push_back(std::move(row));
    }
    return out;
}

Latency latency_bench(codec::Decoder<float>& dec, const diffusion::ToyVAE& vae, const Tensor<float>& images,
                      int warmup) {
    const int n = images.dim(0);
    if (n < 1) throw PreconditionError("latency_bench: no images");
    for (int i = 0; i < warmup; ++i) detect(diffusion::slice_batch(images, i % n, 1), dec, vae);
    std::vector<double> ms;
    for (int i = 0; i < n; ++i) {
        const auto one = diffusion::slice_batch(images, i, 1);
        const auto t0 = std::chrono::steady_clock::now();
        detect(one, dec, vae);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    Latency l;
    l.images = ms.size();
    l.mean_ms = mean(ms);
    std::sort(ms.begin(), ms.end());
    l.median_ms = ms.size() % 2 ? ms[ms.size() / 2] : (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]) / 2.0;
    l.p95_ms = ms[std::min(ms.size() - 1, static_cast<std::size_t>(std::ceil(0.95 * ms.size())) - 1)];
    return l;
}

}  // namespace diffmark::pipeline

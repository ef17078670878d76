#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "diffmark/pipeline/analysis.hpp"
#include "diffmark/pipeline/pipeline.hpp"

using namespace diffmark;
using namespace diffmark::pipeline;

namespace {

struct Models {
    diffusion::ToyVAE vae{{3, 4, 8}, 21};
    diffusion::ToyDenoiser<float> den;
    codec::Encoder<float> enc;
    codec::Decoder<float> dec;
    Models() {
        diffusion::DenoiserConfig dc;
        dc.base = 8;
        dc.mid = 16;
        dc.emb_dim = 16;
        dc.time_freq_dim = 16;
        den = diffusion::ToyDenoiser<float>(dc, 22);
        vae.mark_trained(1.0);
        codec::CodecConfig cc;
        cc.bits = 8;
        cc.embed_dim = 8;
        enc = codec::Encoder<float>(cc, 23);
        dec = codec::Decoder<float>(cc, 24);
    }
    attacks::AttackContext ctx() const { return {&vae, &den, diffusion::NoiseSchedule::linear(), nullptr}; }
};

std::vector<EmbedRequest> requests(int n, int L, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<EmbedRequest> r;
    for (int i = 0; i < n; ++i) r.push_back({codec::Secret::random(L, rng), i % 10, seed * 100 + i});
    return r;
}

EmbedConfig fast() {
    EmbedConfig c;
    c.ddim_steps = 3;
    return c;
}

// Spearman oracle: 1 - 6 sum d^2 / (n (n^2 - 1)) for distinct values.
double spearman_distinct(const std::vector<double>& x, const std::vector<double>& y) {
    auto rank = [](const std::vector<double>& v) {
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            for (double u : v) r[i] += u < v[i];
        return r;
    };
    const auto rx = rank(x), ry = rank(y);
    double d2 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
    const double n = static_cast<double>(x.size());
    return 1 - 6 * d2 / (n * (n * n - 1));
}

SweepRow row(double strength, std::vector<double> ber) {
    SweepRow r;
    r.kind = attacks::AttackKind::noise;
    r.strength = strength;
    r.ber = std::move(ber);
    r.mean_ber = mean(r.ber);
    return r;
}

}  // namespace

TEST_CASE("embedding with a zero perturbation reproduces the clean generation") {
    Models m;
    auto st = m.enc.state();
    for (auto& [name, v] : st.params)
        if (name.rfind("head_mu", 0) == 0) std::ranges::fill(v->mutable_value().data, 0.0f);
    const auto reqs = requests(3, 8, 1);
    const auto wm = embed(reqs, m.enc, m.den, m.vae, fast());
    const auto clean = generate_clean(reqs, m.den, m.vae, m.enc.config(), fast());
    CHECK(wm.latents.data == clean.latents.data);
    CHECK(wm.images.data == clean.images.data);
}

TEST_CASE("embedding contracts") {
    Models m;
    const auto reqs = requests(4, 8, 2);
    const auto e = embed(reqs, m.enc, m.den, m.vae, fast());
    CHECK(e.images.shape == Shape{4, 3, 32, 32});
    CHECK(e.latents.shape == Shape{4, 4, 8, 8});
    for (float v : e.images.data) CHECK_FALSE((v < -1.0f || v > 1.0f));
    CHECK(embed(reqs, m.enc, m.den, m.vae, fast()).images.data == e.images.data);

    // The initial noise depends on the seed and nothing else.
    auto other = reqs;
    other[0].secret.bits[0] ^= 1;
    other[1].label = (other[1].label + 1) % 10;
    CHECK(initial_noise(other, m.enc.config()).data == initial_noise(reqs, m.enc.config()).data);
    other[2].seed += 1;
    CHECK(initial_noise(other, m.enc.config()).data != initial_noise(reqs, m.enc.config()).data);

    // A perturbation changes the output.
    CHECK(generate_clean(reqs, m.den, m.vae, m.enc.config(), fast()).latents.data != e.latents.data);

    CHECK_THROWS_AS(embed(requests(1, 6, 3), m.enc, m.den, m.vae, fast()), ShapeError);
    codec::CodecConfig wide;
    wide.bits = 8;
    wide.embed_dim = 8;
    wide.latent_channels = 3;
    codec::Encoder<float> bad(wide, 1);
    CHECK_THROWS_AS(embed(reqs, bad, m.den, m.vae, fast()), ShapeError);
    auto badlabel = reqs;
    badlabel[0].label = 10;
    CHECK_THROWS_AS(embed(badlabel, m.enc, m.den, m.vae, fast()), RangeError);
}

TEST_CASE("full injection differs from one_over_N") {
    Models m;
    const auto reqs = requests(2, 8, 4);
    auto cfg = fast();
    const auto full = embed(reqs, m.enc, m.den, m.vae, cfg);
    cfg.injection = training::InjectionScale::one_over_N;
    const auto scaled = embed(reqs, m.enc, m.den, m.vae, cfg);
    const auto clean = generate_clean(reqs, m.den, m.vae, m.enc.config(), cfg);
    double d_full = 0, d_scaled = 0;
    for (std::size_t i = 0; i < clean.latents.size(); ++i) {
        d_full += std::abs(full.latents[i] - clean.latents[i]);
        d_scaled += std::abs(scaled.latents[i] - clean.latents[i]);
    }
    CHECK(d_full > d_scaled);
}

TEST_CASE("detection runs one decoder pass per image and no diffusion") {
    Models m;
    const auto reqs = requests(5, 8, 5);
    const auto e = embed(reqs, m.enc, m.den, m.vae, fast());
    m.den.reset_evaluations();
    const long before = m.dec.images_decoded();
    const auto thr = ident::compute_threshold(8, 0.05);
    std::vector<Secret> keys;
    for (const auto& r : reqs) keys.push_back(r.secret);
    const auto det = detect(e.images, m.dec, m.vae, thr, keys);
    CHECK(m.den.evaluations() == 0);
    CHECK(m.dec.images_decoded() - before == 5);
    REQUIRE(det.size() == 5);
    for (std::size_t i = 0; i < det.size(); ++i) {
        CHECK(det[i].matches == 8 - codec::hamming(det[i].secret, keys[i]));
        CHECK(*det[i].decision == (det[i].matches > thr.tau));
    }

    // Registering the decoded key itself always detects.
    const auto self = detect(e.images, m.dec, m.vae, thr, {det[0].secret});
    CHECK(self[0].matches == 8);
    CHECK(*self[0].decision);
    CHECK_FALSE(detect(e.images, m.dec, m.vae)[0].decision.has_value());
    CHECK_THROWS_AS(detect(e.images, m.dec, m.vae, ident::compute_threshold(16, 0.05), keys), ShapeError);
    CHECK_THROWS_AS(detect(e.images, m.dec, m.vae, thr, {keys[0], keys[1]}), ShapeError);
    CHECK_THROWS_AS(detect_latents(Tensor<float>({1, 4, 4, 4}), m.dec), ShapeError);
}

TEST_CASE("spearman correlation") {
    CHECK(spearman({1, 2, 3, 4, 5}, {2, 1, 4, 3, 5}) == doctest::Approx(0.8));
    CHECK(spearman({1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 3, 4}, {7, 7, 7, 7}) == 0.0);
    Rng rng(6);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> x, y;
        for (int i = 0; i < 9; ++i) {
            x.push_back(rng.normal());
            y.push_back(rng.normal());
        }
        CHECK(spearman(x, y) == doctest::Approx(spearman_distinct(x, y)));
    }
    // Ties take the average rank: ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4).
    const double r = 4.5 / std::sqrt(5.0 * 4.5);
    CHECK(spearman({1, 2, 3, 4}, {0, 5, 5, 9}) == doctest::Approx(r));
}

TEST_CASE("bootstrap interval for the sweep rule") {
    Rng rng(7);
    std::vector<SweepRow> up, flat, down;
    for (int l = 0; l < 5; ++l) {
        std::vector<double> b, c, d;
        for (int i = 0; i < 40; ++i) {
            b.push_back(std::clamp(0.1 * l + 0.05 * rng.normal(), 0.0, 1.0));
            c.push_back(0.25);
            d.push_back(std::clamp(0.5 - 0.1 * l + 0.05 * rng.normal(), 0.0, 1.0));
        }
        up.push_back(row(l, b));
        flat.push_back(row(l, c));
        down.push_back(row(l, d));
    }
    const auto iu = spearman_bootstrap(up, 500, 0.95, 1);
    CHECK(iu.estimate == doctest::Approx(1.0));
    CHECK(iu.lo > 0.0);
    const auto iflat = spearman_bootstrap(flat, 200, 0.95, 1);
    CHECK(iflat.estimate == 0.0);
    CHECK(iflat.lo == 0.0);
    CHECK(iflat.hi == 0.0);
    CHECK(spearman_bootstrap(down, 500, 0.95, 1).hi < 0.0);
    CHECK(spearman_bootstrap(up, 500, 0.95, 1).lo == iu.lo);
    auto mixed = up;
    mixed[1].kind = attacks::AttackKind::blur;
    CHECK_THROWS_AS(spearman_bootstrap(mixed, 10, 0.95, 1), PreconditionError);
}

TEST_CASE("attack sweep rows and CSV") {
    Models m;
    const auto reqs = requests(3, 8, 8);
    std::vector<Secret> keys;
    for (const auto& r : reqs) keys.push_back(r.secret);
    const auto e = embed(reqs, m.enc, m.den, m.vae, fast());
    const auto kinds = std::vector{attacks::AttackKind::noise, attacks::AttackKind::jpeg};
    const auto rows = attack_sweep(e.images, keys, m.dec, m.vae, m.ctx(), kinds, 3, 0.05, 1);
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].kind == attacks::AttackKind::noise);
    CHECK(rows[0].strength == 0.0);
    CHECK(rows[5].strength == 10.0);

    // The identity level matches plain detection.
    std::vector<Secret> plain;
    for (const auto& d : detect(e.images, m.dec, m.vae)) plain.push_back(d.secret);
    CHECK(rows[0].ber == per_image_ber(plain, keys));
    CHECK(rows[0].psnr == diffusion::psnr(e.images, e.images));
    for (const auto& r : rows) {
        CHECK(r.bit_acc == doctest::Approx(1 - r.mean_ber));
        CHECK(r.ber.size() == 3);
    }
    CHECK(rows[2].psnr < rows[1].psnr);

    CHECK(sweep_csv_header() == "kind,strength,ber,bit_acc,psnr,tpr,config_hash");
    const auto line = sweep_csv_row(rows[4], "abc123");
    CHECK(line.rfind("jpeg,50,", 0) == 0);
    CHECK(line.substr(line.size() - 7) == ",abc123");
    CHECK_THROWS_AS(attack_sweep(e.images, {keys[0]}, m.dec, m.vae, m.ctx(), kinds, 3, 0.05, 1), ShapeError);
}

TEST_CASE("transfer evaluation and latency") {
    Models m;
    const auto reqs = requests(3, 8, 9);
    const std::vector<TransferTarget> targets{{"a", &m.den}, {"b", &m.den}};
    const std::vector<attacks::AttackSpec> atk{{attacks::AttackKind::noise, 0.05, 1}};
    const auto rows = transfer_eval(m.enc, m.dec, m.vae, targets, reqs, fast(), atk, m.ctx(), 0.05);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].model == "a");
    CHECK(rows[0].bit_acc == rows[1].bit_acc);
    CHECK(rows[0].latent_bit_acc == rows[1].latent_bit_acc);
    REQUIRE(rows[0].attack_tpr.size() == 1);
    CHECK(rows[0].attack_tpr[0].first == attacks::AttackKind::noise);
    CHECK_THROWS_AS(transfer_eval(m.enc, m.dec, m.vae, {{"x", nullptr}}, reqs, fast(), atk, m.ctx(), 0.05),
                    PreconditionError);
}

TEST_CASE("latency benchmark") {
    Models m;
    const Tensor<float> imgs({12, 3, 32, 32});
    const long before = m.dec.images_decoded();
    const auto l = latency_bench(m.dec, m.vae, imgs, 3);
    CHECK(l.images == 12);
    CHECK(m.dec.images_decoded() - before == 15);
    CHECK(l.mean_ms > 0);
    CHECK(l.median_ms <= l.p95_ms);
}

TEST_CASE("spectral analysis") {
    Tensor<float> flat({8, 8}, 1.0f);
    const auto s = log_power_spectrum(flat);
    CHECK(s[4 * 8 + 4] == doctest::Approx(std::log1p(64.0 * 64.0)));
    CHECK(s[0] == doctest::Approx(0.0).epsilon(1e-9));
    Tensor<float> checker({8, 8});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) checker[y * 8 + x] = (x + y) % 2 ? 1.0f : -1.0f;
    const auto c = log_power_spectrum(checker);
    CHECK(c[0] == doctest::Approx(std::log1p(64.0 * 64.0)));
    CHECK(c[4 * 8 + 4] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(band_split(c, 2).inside < band_split(c, 2).outside);
    CHECK(band_split(s, 2).inside > band_split(s, 2).outside);
    const auto prof = radial_profile(s);
    CHECK(prof[0] == doctest::Approx(std::log1p(4096.0)));
    for (std::size_t r = 1; r < prof.size(); ++r) CHECK(prof[r] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK_THROWS_AS(band_split(s, 100), RangeError);

    Tensor<float> d({1, 2, 2, 2}, std::vector<float>{3, 4, 0, 0, 1, 1, 1, 1});
    CHECK(channel_l2(d) == std::vector<double>{5.0, 2.0});

    Tensor<float> a({3, 2, 2}), b({3, 2, 2});
    a[0] = 0.3f;
    a[4] = 0.3f;
    const auto dm = difference_map(a, b, 5.0);
    CHECK(dm[0] == doctest::Approx(1.0));
    CHECK(dm[1] == 0.0f);
    CHECK(difference_map(a, b, 1.0)[0] == doctest::Approx(0.2));
}

TEST_CASE("signal report files") {
    Models m;
    const auto reqs = requests(2, 8, 10);
    const auto wm = embed(reqs, m.enc, m.den, m.vae, fast());
    const auto clean = generate_clean(reqs, m.den, m.vae, m.enc.config(), fast());
    const auto dir = std::filesystem::temp_directory_path() / "diffmark_signal_test";
    std::filesystem::remove_all(dir);
    const auto rep = write_signal_report(dir, m.enc.delta(reqs[0].secret), wm.images, clean.images, 10.0);
    CHECK(rep.l2.size() == 4);
    CHECK(rep.radius == 2.0);
    for (auto f : {"delta_spectrum.png", "signal.csv", "difference.csv", "diff_0.png", "wm_1.png", "clean_1.png"})
        CHECK(std::filesystem::exists(dir / f));
    std::filesystem::remove_all(dir);
}

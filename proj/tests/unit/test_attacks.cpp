#include <doctest.h>

#include <cmath>

#include "diffmark/attacks/attacks.hpp"
#include "diffmark/lab/dataset.hpp"

using namespace diffmark;
using namespace diffmark::attacks;

namespace {

Tensor<float> images(int n, std::uint64_t seed) { return lab::generate_dataset(n, seed).images; }

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
    return m;
}

double mse(const Tensor<float>& a, const Tensor<float>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (a[i] - b[i]);
    return s / a.size();
}

struct Models {
    diffusion::ToyVAE vae{{3, 4, 8}, 3};
    diffusion::ToyDenoiser<float> den;
    Surrogate sur{10, 4};
    Models() {
        diffusion::DenoiserConfig dc;
        dc.base = 8;
        dc.mid = 16;
        dc.emb_dim = 16;
        dc.time_freq_dim = 16;
        den = diffusion::ToyDenoiser<float>(dc, 5);
        vae.mark_trained(1.0);
    }
    AttackContext ctx() const { return {&vae, &den, diffusion::NoiseSchedule::linear(), &sur}; }
};

}  // namespace

TEST_CASE("every attack has a kind name and a range") {
    CHECK(all_kinds().size() == 13);
    for (auto k : all_kinds()) {
        CHECK(parse_kind(to_string(k)) == k);
        const auto s = sweep_strengths(k, 5);
        CHECK(s.front() == strength_range(k).benign);
        CHECK(s.back() == strength_range(k).strongest);
    }
    CHECK_THROWS_AS(parse_kind("smudge"), ConfigError);
    CHECK(strength_range(AttackKind::rotation).strongest == 45);
    CHECK(strength_range(AttackKind::rcrop).strongest == 0.5);
    CHECK(strength_range(AttackKind::erase).strongest == 0.25);
    CHECK(strength_range(AttackKind::blur).strongest == 20);
    CHECK(strength_range(AttackKind::noise).strongest == 0.1);
    CHECK(strength_range(AttackKind::jpeg).benign == 90);
    CHECK(strength_range(AttackKind::jpeg).strongest == 10);
    CHECK(strength_range(AttackKind::adv_klvae).strongest == 8);
}

TEST_CASE("identity at the benign end") {
    const auto x = images(4, 1);
    const Models m;
    for (auto k : all_kinds()) {
        const auto r = strength_range(k);
        if (!r.identity_at_benign) continue;
        CAPTURE(to_string(k));
        CHECK(apply(x, {k, r.benign, 7}, m.ctx()).data == x.data);
    }
}

TEST_CASE("strength outside the range is rejected") {
    const auto x = images(1, 2);
    CHECK_THROWS_AS(apply_distortion(x, {AttackKind::rotation, 50, 0}), RangeError);
    CHECK_THROWS_AS(apply_distortion(x, {AttackKind::rcrop, 0.4, 0}), RangeError);
    CHECK_THROWS_AS(apply_distortion(x, {AttackKind::jpeg, 95, 0}), RangeError);
    CHECK_THROWS_AS(apply_distortion(x, {AttackKind::noise, -0.01, 0}), RangeError);
    CHECK_THROWS_AS(apply_distortion(x, {AttackKind::regen_vae, 3, 0}), PreconditionError);
    CHECK_THROWS_AS(apply_distortion(Tensor<float>({1, 1, 8, 8}), {AttackKind::blur, 3, 0}), ShapeError);
}

TEST_CASE("distortions keep shape, range and determinism") {
    const auto x = images(3, 3);
    for (auto k : all_kinds()) {
        if (category(k) == Category::regeneration || category(k) == Category::adversarial) continue;
        CAPTURE(to_string(k));
        const AttackSpec spec{k, strength_range(k).strongest, 11};
        const auto y = apply_distortion(x, spec);
        CHECK(y.shape == x.shape);
        for (float v : y.data) CHECK_FALSE((v < -1.0f || v > 1.0f));
        CHECK(apply_distortion(x, spec).data == y.data);
        CHECK(y.data != x.data);
    }
}

TEST_CASE("distortion examples") {
    SUBCASE("noise sigma in pixel units") {
        const Tensor<float> grey({8, 3, 32, 32});
        const auto y = apply_distortion(grey, {AttackKind::noise, 0.1, 1});
        double s = 0, sq = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double d = (y[i] - grey[i]) / 2.0;
            s += d;
            sq += d * d;
        }
        const double mean = s / y.size();
        CHECK(std::sqrt(sq / y.size() - mean * mean) == doctest::Approx(0.1).epsilon(0.03));
        CHECK(apply_distortion(grey, {AttackKind::noise, 0.1, 2}).data != y.data);
    }
    SUBCASE("brightness scales [0, 1] intensities") {
        const Tensor<float> x({1, 3, 4, 4}, -0.5f);
        for (float v : apply_distortion(x, {AttackKind::bright, 2.0, 0}).data) CHECK(v == doctest::Approx(0.0f));
        const Tensor<float> hi({1, 3, 4, 4}, 0.5f);
        for (float v : apply_distortion(hi, {AttackKind::bright, 2.0, 0}).data) CHECK(v == 1.0f);
    }
    SUBCASE("constant images survive contrast, blur and crop") {
        const Tensor<float> x({1, 3, 32, 32}, 0.25f);
        for (auto spec : {AttackSpec{AttackKind::contrast, 2.0, 0}, AttackSpec{AttackKind::blur, 20, 0},
                          AttackSpec{AttackKind::rcrop, 0.5, 0}})
            CHECK(max_abs_diff(apply_distortion(x, spec), x) < 1e-6);
    }
    SUBCASE("rotation blackens the corners") {
        const Tensor<float> x({1, 3, 32, 32}, 0.25f);
        const auto y = apply_distortion(x, {AttackKind::rotation, 45, 0});
        CHECK(y[0] == doctest::Approx(-1.0f));
        CHECK(y[16 * 32 + 16] == doctest::Approx(0.25f));
    }
    SUBCASE("erasing covers the requested area") {
        const Tensor<float> x({1, 3, 32, 32}, 0.5f);
        const auto y = apply_distortion(x, {AttackKind::erase, 0.25, 3});
        int zeros = 0;
        for (int p = 0; p < 1024; ++p) zeros += y[p] == 0.0f;
        CHECK(zeros == 256);
    }
    SUBCASE("blur lowers variance and JPEG quality orders error") {
        const auto x = images(4, 4);
        auto var = [](const Tensor<float>& t) {
            double s = 0, sq = 0;
            for (float v : t.data) {
                s += v;
                sq += double(v) * v;
            }
            return sq / t.size() - (s / t.size()) * (s / t.size());
        };
        CHECK(var(apply_distortion(x, {AttackKind::blur, 9, 0})) < var(x));
        CHECK(mse(apply_distortion(x, {AttackKind::jpeg, 10, 0}), x) > mse(apply_distortion(x, {AttackKind::jpeg, 90, 0}), x));
    }
}

TEST_CASE("regeneration contracts") {
    const Models m;
    const auto ctx = m.ctx();
    const auto x = images(2, 5);
    const auto roundtrip = m.vae.decode(m.vae.encode(x));
    CHECK(apply_regeneration(x, {AttackKind::regen_diff, 0, 1}, ctx).data == roundtrip.data);
    CHECK(apply_regeneration(x, {AttackKind::regen_vae, 7, 1}, ctx).data == roundtrip.data);
    CHECK(apply_regeneration(x, {AttackKind::regen_vae, 1, 1}, ctx).data != roundtrip.data);

    const double s = 60;
    const auto twice = apply_regeneration(apply_regeneration(x, {AttackKind::regen_diff, s, 9}, ctx),
                                          {AttackKind::regen_diff, s, 10}, ctx);
    CHECK(apply_regeneration(x, {AttackKind::rinse_2xdiff, s, 9}, ctx).data == twice.data);
    CHECK_THROWS_AS(apply_regeneration(x, {AttackKind::regen_diff, 60, 1}, AttackContext{}), PreconditionError);
    CHECK_THROWS_AS(apply_regeneration(x, {AttackKind::regen_diff, 250, 1}, ctx), RangeError);
}

TEST_CASE("adversarial projection and strength") {
    const Models m;
    const auto ctx = m.ctx();
    const auto x = images(2, 6);
    for (auto kind : {AttackKind::adv_klvae, AttackKind::adv_rn_surrogate}) {
        CAPTURE(to_string(kind));
        CHECK(apply_adversarial(x, {kind, 0, 1}, ctx).data == x.data);
        const double eps = 2.0 * 4 / 255.0;
        const auto adv = apply_adversarial(x, {kind, 4, 1}, ctx);
        CHECK(max_abs_diff(adv, x) <= eps * (1 + 1e-6));
        for (float v : adv.data) CHECK_FALSE((v < -1.0f || v > 1.0f));

        // Random sign noise at the same budget moves the features less.
        Rng rng(8);
        Tensor<float> noisy = x;
        for (auto& v : noisy.data) v = std::clamp(v + static_cast<float>(rng.bernoulli() ? eps : -eps), -1.0f, 1.0f);
        const auto d_adv = feature_divergence(adv, x, kind, ctx);
        const auto d_noise = feature_divergence(noisy, x, kind, ctx);
        for (std::size_t i = 0; i < d_adv.size(); ++i) CHECK(d_adv[i] > d_noise[i]);
    }
}

TEST_CASE("surrogate learns the synthetic classes") {
    const auto d = lab::generate_dataset(600, 12);
    Surrogate s(10, 13);
    SurrogateTrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch = 32;
    // Twice chance on ten classes.
    CHECK(train_surrogate(s, d.images, d.labels, cfg) > 0.2);
}

#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdlib>
#include <vector>

#include "diffmark/core/rng.hpp"
#include "diffmark/simd/kernels.hpp"

using namespace diffmark;

namespace {

template <typename T>
std::vector<T> random_vec(Rng& rng, std::size_t n) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return v;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

template <typename T>
simd::GemmFn<T> gemm_of(const simd::KernelTable& t) {
    if constexpr (sizeof(T) == 4)
        return t.gemm_f32;
    else
        return t.gemm_f64;
}

template <typename T>
void gemm_equivalence(const simd::KernelTable& vec, T tol) {
    const auto& ref = simd::scalar_kernels();
    Rng rng(11);
    const std::array<int, 3> shapes[] = {{1, 1, 1}, {3, 5, 7}, {4, 16, 9}, {17, 33, 65}, {64, 100, 36}, {5, 1, 300}};
    for (auto [m, n, k] : shapes)
        for (int ta = 0; ta < 2; ++ta)
            for (int tb = 0; tb < 2; ++tb)
                for (int acc = 0; acc < 2; ++acc) {
                    auto a = random_vec<T>(rng, static_cast<std::size_t>(m) * k);
                    auto b = random_vec<T>(rng, static_cast<std::size_t>(k) * n);
                    auto c0 = random_vec<T>(rng, static_cast<std::size_t>(m) * n);
                    auto c1 = c0;
                    const int lda = ta ? m : k, ldb = tb ? k : n;
                    gemm_of<T>(ref)(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c0.data(), n, acc);
                    gemm_of<T>(vec)(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c1.data(), n, acc);
                    CHECK(max_abs_diff(c0, c1) <= tol * std::sqrt(double(k)));
                }
}

}  // namespace

TEST_CASE("reference gemm matches a naive triple loop") {
    Rng rng(3);
    const int m = 5, n = 6, k = 7;
    auto a = random_vec<double>(rng, m * k), b = random_vec<double>(rng, k * n);
    std::vector<double> c(m * n), want(m * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p) want[i * n + j] += a[i * k + p] * b[p * n + j];
    simd::scalar_kernels().gemm_f64(false, false, m, n, k, a.data(), k, b.data(), n, c.data(), n, false);
    CHECK(max_abs_diff(c, want) < 1e-12);
}

TEST_CASE("avx2 kernels agree with the scalar reference") {
    const simd::KernelTable* vec = simd::avx2_kernels();
    if (!vec) {
        MESSAGE("AVX2 kernels unavailable on this build/CPU; equivalence test skipped");
        return;
    }
    const auto& ref = simd::scalar_kernels();

    SUBCASE("gemm f32") { gemm_equivalence<float>(*vec, 1e-5f); }
    SUBCASE("gemm f64") { gemm_equivalence<double>(*vec, 1e-12); }

    SUBCASE("axpy and dot") {
        Rng rng(5);
        for (std::size_t n : {0u, 1u, 7u, 8u, 9u, 31u, 1000u}) {
            auto x = random_vec<float>(rng, n), y0 = random_vec<float>(rng, n);
            auto y1 = y0;
            ref.axpy_f32(n, 0.7f, x.data(), y0.data());
            vec->axpy_f32(n, 0.7f, x.data(), y1.data());
            CHECK(max_abs_diff(y0, y1) < 1e-6);
            CHECK(std::abs(ref.dot_f32(n, x.data(), y0.data()) - vec->dot_f32(n, x.data(), y0.data())) <
                  1e-3 * (1 + n / 100.0));
            auto xd = random_vec<double>(rng, n), yd = random_vec<double>(rng, n);
            CHECK(std::abs(ref.dot_f64(n, xd.data(), yd.data()) - vec->dot_f64(n, xd.data(), yd.data())) < 1e-10);
        }
    }

    SUBCASE("adamw") {
        Rng rng(9);
        const std::size_t n = 37;
        auto p0 = random_vec<float>(rng, n), g = random_vec<float>(rng, n);
        auto p1 = p0;
        std::vector<float> m0(n), v0(n), m1(n), v1(n);
        simd::AdamWArgs args{1e-3f, 0.9f, 0.999f, 1e-8f, 0.01f, 0.1f, 0.001f};
        for (int s = 0; s < 3; ++s) {
            ref.adamw_f32(n, p0.data(), g.data(), m0.data(), v0.data(), args);
            vec->adamw_f32(n, p1.data(), g.data(), m1.data(), v1.data(), args);
        }
        CHECK(max_abs_diff(p0, p1) < 1e-6);
        CHECK(max_abs_diff(v0, v1) < 1e-6);
    }

    SUBCASE("hamming scan") {
        Rng rng(13);
        for (int words : {1, 2, 3}) {
            const std::size_t n = 1037;
            std::vector<std::uint64_t> keys(n * words), q(words);
            for (auto& k : keys) k = rng.bits();
            for (auto& k : q) k = rng.bits();
            std::vector<std::uint16_t> d0(n), d1(n);
            ref.hamming_scan(keys.data(), n, words, q.data(), d0.data());
            vec->hamming_scan(keys.data(), n, words, q.data(), d1.data());
            CHECK(d0 == d1);
        }
    }
}

TEST_CASE("forced table overrides dispatch") {
    simd::force_table(&simd::scalar_kernels());
    CHECK(simd::active().name == "scalar");
    simd::force_table(nullptr);
    if (simd::avx2_kernels() && !std::getenv("DIFFMARK_SIMD")) CHECK(simd::active().name != "scalar");
}

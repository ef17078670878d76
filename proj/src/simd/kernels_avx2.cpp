// Compiled with -mavx2 -mfma; only reached through the dispatch table after
// a runtime CPU check.

#include "diffmark/simd/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace diffmark::simd {
namespace {

template <typename T>
struct Vec;

template <>
struct Vec<float> {
    using reg = __m256;
    static constexpr int width = 8;
    static reg zero() { return _mm256_setzero_ps(); }
    static reg set1(float v) { return _mm256_set1_ps(v); }
    static reg load(const float* p) { return _mm256_loadu_ps(p); }
    static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
    static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
    static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
    static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
    static float hsum(reg v) {
        __m128 lo = _mm256_castps256_ps128(v);
        __m128 hi = _mm256_extractf128_ps(v, 1);
        lo = _mm_add_ps(lo, hi);
        lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
        lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 0x55));
        return _mm_cvtss_f32(lo);
    }
};

template <>
struct Vec<double> {
    using reg = __m256d;
    static constexpr int width = 4;
    static reg zero() { return _mm256_setzero_pd(); }
    static reg set1(double v) { return _mm256_set1_pd(v); }
    static reg load(const double* p) { return _mm256_loadu_pd(p); }
    static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
    static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
    static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
    static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
    static double hsum(reg v) {
        __m128d lo = _mm256_castpd256_pd128(v);
        __m128d hi = _mm256_extractf128_pd(v, 1);
        lo = _mm_add_pd(lo, hi);
        lo = _mm_add_sd(lo, _mm_unpackhi_pd(lo, lo));
        return _mm_cvtsd_f64(lo);
    }
};

constexpr int kMR = 6;
constexpr int kKC = 256;
constexpr int kMC = 72;
constexpr int kNC = 4096;

// kMR x (2 * width) register tile. ap is a packed A strip (kMR values per k
// step); B rows are bstride apart. Rows past `rows` are computed but not
// stored. Full-width only; the caller routes ragged panels through a tile.
template <typename T>
inline void micro_kernel(const T* ap, const T* bp, std::ptrdiff_t bstride, int k, T* c, std::ptrdiff_t ldc,
                         int rows, bool acc_c) {
    using V = Vec<T>;
    auto c00 = V::zero(), c01 = V::zero(), c10 = V::zero(), c11 = V::zero();
    auto c20 = V::zero(), c21 = V::zero(), c30 = V::zero(), c31 = V::zero();
    auto c40 = V::zero(), c41 = V::zero(), c50 = V::zero(), c51 = V::zero();
    for (int p = 0; p < k; ++p) {
        const auto b0 = V::load(bp);
        const auto b1 = V::load(bp + V::width);
        bp += bstride;
        auto a = V::set1(ap[0]);
        c00 = V::fmadd(a, b0, c00);
        c01 = V::fmadd(a, b1, c01);
        a = V::set1(ap[1]);
        c10 = V::fmadd(a, b0, c10);
        c11 = V::fmadd(a, b1, c11);
        a = V::set1(ap[2]);
        c20 = V::fmadd(a, b0, c20);
        c21 = V::fmadd(a, b1, c21);
        a = V::set1(ap[3]);
        c30 = V::fmadd(a, b0, c30);
        c31 = V::fmadd(a, b1, c31);
        a = V::set1(ap[4]);
        c40 = V::fmadd(a, b0, c40);
        c41 = V::fmadd(a, b1, c41);
        a = V::set1(ap[5]);
        c50 = V::fmadd(a, b0, c50);
        c51 = V::fmadd(a, b1, c51);
        ap += kMR;
    }
    const typename V::reg out[kMR][2] = {{c00, c01}, {c10, c11}, {c20, c21}, {c30, c31}, {c40, c41}, {c50, c51}};
    for (int r = 0; r < rows; ++r) {
        T* crow = c + r * ldc;
        if (acc_c) {
            V::store(crow, V::add(V::load(crow), out[r][0]));
            V::store(crow + V::width, V::add(V::load(crow + V::width), out[r][1]));
        } else {
            V::store(crow, out[r][0]);
            V::store(crow + V::width, out[r][1]);
        }
    }
}

// Packs op(A)[i0:i0+mc, p0:p0+kc] into kMR-row strips, zero-padding the last.
template <typename T>
void pack_a(bool ta, const T* a, int lda, int i0, int mc, int p0, int kc, T* dst) {
    for (int ip = 0; ip < mc; ip += kMR) {
        const int rows = std::min(kMR, mc - ip);
        T* d = dst + static_cast<std::size_t>(ip) * kc;
        if (ta) {
            for (int p = 0; p < kc; ++p) {
                const T* src = a + static_cast<std::ptrdiff_t>(p0 + p) * lda + i0 + ip;
                T* dp = d + p * kMR;
                for (int r = 0; r < rows; ++r) dp[r] = src[r];
                for (int r = rows; r < kMR; ++r) dp[r] = T(0);
            }
            continue;
        }
        for (int r = 0; r < kMR; ++r) {
            if (r >= rows) {
                for (int p = 0; p < kc; ++p) d[p * kMR + r] = T(0);
                continue;
            }
            const T* src = a + static_cast<std::ptrdiff_t>(i0 + ip + r) * lda + p0;
            for (int p = 0; p < kc; ++p) d[p * kMR + r] = src[p];
        }
    }
}

// Packs op(B)[p0:p0+kc, j0:j0+nc] into nr-column panels, zero-padding the last.
template <typename T>
void pack_b(bool tb, const T* b, int ldb, int p0, int kc, int j0, int nc, T* dst) {
    constexpr int nr = 2 * Vec<T>::width;
    for (int jp = 0; jp < nc; jp += nr) {
        const int cols = std::min(nr, nc - jp);
        T* d = dst + static_cast<std::size_t>(jp) * kc;
        if (!tb) {
            for (int p = 0; p < kc; ++p) {
                const T* src = b + static_cast<std::ptrdiff_t>(p0 + p) * ldb + j0 + jp;
                T* row = d + p * nr;
                std::copy(src, src + cols, row);
                std::fill(row + cols, row + nr, T(0));
            }
        } else {
            for (int jj = 0; jj < nr; ++jj) {
                if (jj >= cols) {
                    for (int p = 0; p < kc; ++p) d[p * nr + jj] = T(0);
                    continue;
                }
                const T* src = b + static_cast<std::ptrdiff_t>(j0 + jp + jj) * ldb + p0;
                for (int p = 0; p < kc; ++p) d[p * nr + jj] = src[p];
            }
        }
    }
}

template <typename T>
void gemm_avx2(bool ta, bool tb, int m, int n, int k, const T* a, int lda,
               const T* b, int ldb, T* c, int ldc, bool accumulate) {
    using V = Vec<T>;
    constexpr int nr = 2 * V::width;
    if (m <= 0 || n <= 0) return;
    if (k <= 0) {
        if (!accumulate)
            for (int i = 0; i < m; ++i)
                std::fill(c + static_cast<std::ptrdiff_t>(i) * ldc,
                          c + static_cast<std::ptrdiff_t>(i) * ldc + n, T(0));
        return;
    }

    thread_local std::vector<T> apack;
    thread_local std::vector<T> bpack;
    const int mc_max = std::min(kMC, (m + kMR - 1) / kMR * kMR);
    const int kc_max = std::min(kKC, k);
    apack.resize(static_cast<std::size_t>(mc_max) * kc_max);
    // Untransposed B is read in place; only the ragged last panel is packed.
    const int nc_max = tb ? std::min(kNC, (n + nr - 1) / nr * nr) : nr;
    bpack.resize(static_cast<std::size_t>(nc_max) * kc_max);

    alignas(32) T tile[kMR * nr];
    for (int j0 = 0; j0 < n; j0 += kNC) {
        const int nc = std::min(kNC, n - j0);
        for (int p0 = 0; p0 < k; p0 += kKC) {
            const int kc = std::min(kKC, k - p0);
            const bool acc_c = accumulate || p0 > 0;
            const int full = nc / nr * nr;
            if (tb)
                pack_b(tb, b, ldb, p0, kc, j0, nc, bpack.data());
            else if (full < nc)
                pack_b(tb, b, ldb, p0, kc, j0 + full, nc - full, bpack.data());
            for (int i0 = 0; i0 < m; i0 += kMC) {
                const int mc = std::min(kMC, m - i0);
                pack_a(ta, a, lda, i0, mc, p0, kc, apack.data());
                for (int jp = 0; jp < nc; jp += nr) {
                    const int cols = std::min(nr, nc - jp);
                    const T* bp;
                    std::ptrdiff_t bstride = nr;
                    if (tb) {
                        bp = bpack.data() + static_cast<std::size_t>(jp) * kc;
                    } else if (cols == nr) {
                        bp = b + static_cast<std::ptrdiff_t>(p0) * ldb + j0 + jp;
                        bstride = ldb;
                    } else {
                        bp = bpack.data();
                    }
                    for (int ip = 0; ip < mc; ip += kMR) {
                        const T* ap = apack.data() + static_cast<std::size_t>(ip) * kc;
                        const int rows = std::min(kMR, mc - ip);
                        T* cblk = c + static_cast<std::ptrdiff_t>(i0 + ip) * ldc + j0 + jp;
                        if (cols == nr) {
                            micro_kernel<T>(ap, bp, bstride, kc, cblk, ldc, rows, acc_c);
                        } else {
                            micro_kernel<T>(ap, bp, bstride, kc, tile, nr, rows, false);
                            for (int r = 0; r < rows; ++r)
                                for (int jj = 0; jj < cols; ++jj) {
                                    T& dst = cblk[static_cast<std::ptrdiff_t>(r) * ldc + jj];
                                    dst = acc_c ? dst + tile[r * nr + jj] : tile[r * nr + jj];
                                }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void axpy_avx2(std::size_t n, T alpha, const T* x, T* y) {
    using V = Vec<T>;
    const auto av = V::set1(alpha);
    std::size_t i = 0;
    for (; i + V::width <= n; i += V::width)
        V::store(y + i, V::fmadd(av, V::load(x + i), V::load(y + i)));
    for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

template <typename T>
T dot_avx2(std::size_t n, const T* x, const T* y) {
    using V = Vec<T>;
    auto s0 = V::zero();
    auto s1 = V::zero();
    std::size_t i = 0;
    for (; i + 2 * V::width <= n; i += 2 * V::width) {
        s0 = V::fmadd(V::load(x + i), V::load(y + i), s0);
        s1 = V::fmadd(V::load(x + i + V::width), V::load(y + i + V::width), s1);
    }
    T s = V::hsum(V::add(s0, s1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void adamw_avx2(std::size_t n, float* p, const float* g, float* m, float* v,
                const AdamWArgs& a) {
    const __m256 b1 = _mm256_set1_ps(a.beta1);
    const __m256 b2 = _mm256_set1_ps(a.beta2);
    const __m256 ob1 = _mm256_set1_ps(1.0f - a.beta1);
    const __m256 ob2 = _mm256_set1_ps(1.0f - a.beta2);
    const __m256 bc1 = _mm256_set1_ps(a.bias_corr1);
    const __m256 bc2 = _mm256_set1_ps(a.bias_corr2);
    const __m256 eps = _mm256_set1_ps(a.eps);
    const __m256 lr = _mm256_set1_ps(a.lr);
    const __m256 wd = _mm256_set1_ps(a.weight_decay);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 gv = _mm256_loadu_ps(g + i);
        __m256 mv = _mm256_loadu_ps(m + i);
        __m256 vv = _mm256_loadu_ps(v + i);
        __m256 pv = _mm256_loadu_ps(p + i);
        mv = _mm256_add_ps(_mm256_mul_ps(b1, mv), _mm256_mul_ps(ob1, gv));
        vv = _mm256_add_ps(_mm256_mul_ps(b2, vv), _mm256_mul_ps(_mm256_mul_ps(ob2, gv), gv));
        const __m256 mh = _mm256_div_ps(mv, bc1);
        const __m256 vh = _mm256_div_ps(vv, bc2);
        const __m256 upd = _mm256_add_ps(_mm256_div_ps(mh, _mm256_add_ps(_mm256_sqrt_ps(vh), eps)),
                                         _mm256_mul_ps(wd, pv));
        pv = _mm256_sub_ps(pv, _mm256_mul_ps(lr, upd));
        _mm256_storeu_ps(m + i, mv);
        _mm256_storeu_ps(v + i, vv);
        _mm256_storeu_ps(p + i, pv);
    }
    for (; i < n; ++i) {
        m[i] = a.beta1 * m[i] + (1.0f - a.beta1) * g[i];
        v[i] = a.beta2 * v[i] + ((1.0f - a.beta2) * g[i]) * g[i];
        const float mh = m[i] / a.bias_corr1;
        const float vh = v[i] / a.bias_corr2;
        p[i] -= a.lr * (mh / (std::sqrt(vh) + a.eps) + a.weight_decay * p[i]);
    }
}

// Nibble-LUT popcount (Mula): per-byte counts via pshufb, summed per 64-bit
// lane with psadbw.
inline __m256i popcount_epi64(__m256i v) {
    const __m256i lut = _mm256_setr_epi8(0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4,
                                         0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4);
    const __m256i low = _mm256_set1_epi8(0x0f);
    const __m256i lo = _mm256_and_si256(v, low);
    const __m256i hi = _mm256_and_si256(_mm256_srli_epi16(v, 4), low);
    const __m256i cnt = _mm256_add_epi8(_mm256_shuffle_epi8(lut, lo), _mm256_shuffle_epi8(lut, hi));
    return _mm256_sad_epu8(cnt, _mm256_setzero_si256());
}

void hamming_avx2(const std::uint64_t* keys, std::size_t n, int words,
                  const std::uint64_t* q, std::uint16_t* out) {
    std::size_t i = 0;
    if (words == 1) {
        const __m256i qv = _mm256_set1_epi64x(static_cast<long long>(q[0]));
        alignas(32) std::uint64_t lanes[4];
        for (; i + 4 <= n; i += 4) {
            const __m256i kv = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(keys + i));
            _mm256_store_si256(reinterpret_cast<__m256i*>(lanes),
                               popcount_epi64(_mm256_xor_si256(kv, qv)));
            out[i] = static_cast<std::uint16_t>(lanes[0]);
            out[i + 1] = static_cast<std::uint16_t>(lanes[1]);
            out[i + 2] = static_cast<std::uint16_t>(lanes[2]);
            out[i + 3] = static_cast<std::uint16_t>(lanes[3]);
        }
    }
    for (; i < n; ++i) {
        const std::uint64_t* key = keys + i * static_cast<std::size_t>(words);
        int d = 0;
        for (int w = 0; w < words; ++w)
            d += static_cast<int>(_mm_popcnt_u64(key[w] ^ q[w]));
        out[i] = static_cast<std::uint16_t>(d);
    }
}

}  // namespace

const KernelTable* avx2_kernels_impl() {
    static const KernelTable table{
        "avx2",           &gemm_avx2<float>, &gemm_avx2<double>,
        &axpy_avx2<float>, &axpy_avx2<double>, &dot_avx2<float>,
        &dot_avx2<double>, &adamw_avx2,        &hamming_avx2,
    };
    return &table;
}

}  // namespace diffmark::simd

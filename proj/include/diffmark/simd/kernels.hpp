#pragma once

// Data-parallel inner loops used by the tensor engine and the identification
// scan. Every kernel has a portable scalar reference and, on x86-64, an
// AVX2+FMA variant; the active table is chosen once at first use.

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace diffmark::simd {

// C = (accumulate ? C : 0) + op(A) * op(B), row-major.
// op(A) is M x K, op(B) is K x N.
template <typename T>
using GemmFn = void (*)(bool trans_a, bool trans_b, int m, int n, int k,
                        const T* a, int lda, const T* b, int ldb,
                        T* c, int ldc, bool accumulate);

template <typename T>
using AxpyFn = void (*)(std::size_t n, T alpha, const T* x, T* y);

template <typename T>
using DotFn = T (*)(std::size_t n, const T* x, const T* y);

struct AdamWArgs {
    float lr;
    float beta1;
    float beta2;
    float eps;
    float weight_decay;
    float bias_corr1;  // 1 - beta1^t
    float bias_corr2;  // 1 - beta2^t
};

using AdamWFn = void (*)(std::size_t n, float* param, const float* grad,
                         float* m, float* v, const AdamWArgs& args);

// Hamming distance of `query` (words x uint64) to each of `n` keys stored
// row-major in `keys`; distances written to `out`.
using HammingScanFn = void (*)(const std::uint64_t* keys, std::size_t n,
                               int words, const std::uint64_t* query,
                               std::uint16_t* out);

struct KernelTable {
    std::string_view name;
    GemmFn<float> gemm_f32;
    GemmFn<double> gemm_f64;
    AxpyFn<float> axpy_f32;
    AxpyFn<double> axpy_f64;
    DotFn<float> dot_f32;
    DotFn<double> dot_f64;
    AdamWFn adamw_f32;
    HammingScanFn hamming_scan;
};

const KernelTable& scalar_kernels();

// nullptr when the build or the running CPU lacks AVX2+FMA.
const KernelTable* avx2_kernels();

bool cpu_has_avx2_fma();

// Active table. DIFFMARK_SIMD=scalar forces the reference kernels.
const KernelTable& active();

// Testing hook; pass nullptr to restore automatic selection.
void force_table(const KernelTable* table);

template <typename T>
inline void gemm(bool ta, bool tb, int m, int n, int k, const T* a, int lda,
                 const T* b, int ldb, T* c, int ldc, bool accumulate) {
    if constexpr (sizeof(T) == 4)
        active().gemm_f32(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
    else
        active().gemm_f64(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

template <typename T>
inline void axpy(std::size_t n, T alpha, const T* x, T* y) {
    if constexpr (sizeof(T) == 4)
        active().axpy_f32(n, alpha, x, y);
    else
        active().axpy_f64(n, alpha, x, y);
}

template <typename T>
inline T dot(std::size_t n, const T* x, const T* y) {
    if constexpr (sizeof(T) == 4)
        return active().dot_f32(n, x, y);
    else
        return active().dot_f64(n, x, y);
}

}  // namespace diffmark::simd

#include "diffmark/simd/kernels.hpp"

#include <bit>
#include <cmath>

namespace diffmark::simd {
namespace {

template <typename T>
void gemm_ref(bool ta, bool tb, int m, int n, int k, const T* a, int lda,
              const T* b, int ldb, T* c, int ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        if (!accumulate)
            for (int j = 0; j < n; ++j) crow[j] = T(0);
        for (int p = 0; p < k; ++p) {
            const T av = ta ? a[static_cast<std::ptrdiff_t>(p) * lda + i]
                            : a[static_cast<std::ptrdiff_t>(i) * lda + p];
            if (av == T(0)) continue;
            if (!tb) {
                const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            } else {
                for (int j = 0; j < n; ++j)
                    crow[j] += av * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
            }
        }
    }
}

template <typename T>
void axpy_ref(std::size_t n, T alpha, const T* x, T* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T dot_ref(std::size_t n, const T* x, const T* y) {
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

void adamw_ref(std::size_t n, float* p, const float* g, float* m, float* v,
               const AdamWArgs& a) {
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = a.beta1 * m[i] + (1.0f - a.beta1) * g[i];
        v[i] = a.beta2 * v[i] + (1.0f - a.beta2) * g[i] * g[i];
        const float mh = m[i] / a.bias_corr1;
        const float vh = v[i] / a.bias_corr2;
        p[i] -= a.lr * (mh / (std::sqrt(vh) + a.eps) + a.weight_decay * p[i]);
    }
}

void hamming_ref(const std::uint64_t* keys, std::size_t n, int words,
                 const std::uint64_t* q, std::uint16_t* out) {
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t* key = keys + i * static_cast<std::size_t>(words);
        int d = 0;
        for (int w = 0; w < words; ++w) d += std::popcount(key[w] ^ q[w]);
        out[i] = static_cast<std::uint16_t>(d);
    }
}

}  // namespace

const KernelTable& scalar_kernels() {
    static const KernelTable table{
        "scalar",        &gemm_ref<float>, &gemm_ref<double>,
        &axpy_ref<float>, &axpy_ref<double>, &dot_ref<float>,
        &dot_ref<double>, &adamw_ref,        &hamming_ref,
    };
    return table;
}

}  // namespace diffmark::simd

#pragma once

// Differentiable tensor operations. Layouts are NCHW for images/latents and
// (N, features) for vectors. Instantiated for float and double.

#include <vector>

#include "diffmark/core/autograd.hpp"

namespace diffmark::ag {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
// a * s where s is a single-element Var.
template <typename T> Var<T> mul_scalar(const Var<T>& a, const Var<T>& s);
// Row n of `a` (leading dimension) multiplied by the constant coeffs[n].
template <typename T> Var<T> scale_rows(const Var<T>& a, const std::vector<T>& coeffs);
// x[N,C,...] + v[N,C] broadcast over trailing dims.
template <typename T> Var<T> add_channel(const Var<T>& x, const Var<T>& v);

template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);
template <typename T> Var<T> sqrt(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);
template <typename T> Var<T> abs(const Var<T>& a);
// Gradient passes where lo <= x <= hi.
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);

template <typename T> Var<T> reshape(const Var<T>& a, Shape s);
// Concatenate along axis 0 or 1.
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, int axis);
template <typename T> Var<T> slice_rows(const Var<T>& a, int start, int count);
// x[N,1,H,W] -> x[N,C,H,W] by copying the single channel.
template <typename T> Var<T> repeat_channels(const Var<T>& x, int channels);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// Per-row mean over all trailing elements: (N, ...) -> (N).
template <typename T> Var<T> mean_rows(const Var<T>& a);
// Per-row maximum over trailing elements; gradient to the first argmax.
template <typename T> Var<T> max_rows(const Var<T>& a);
// Mean over channel dim: (N,C,H,W) -> (N,1,H,W).
template <typename T> Var<T> mean_channels(const Var<T>& a);

// x[N,in] * w[out,in]^T + b[out]; b may be undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
// a[M,K] * b[K,N].
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
template <typename T> Var<T> upsample2x(const Var<T>& x);
// Uniform k x k window mean, stride 1, no padding.
template <typename T> Var<T> avg_pool(const Var<T>& x, int k);

// Batch normalization over (N,H,W) per channel. In training mode batch
// statistics are used and running stats updated in place.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                  T momentum = T(0.1), T eps = T(1e-5));

// log-softmax over the last dimension.
template <typename T> Var<T> log_softmax(const Var<T>& x);

// out[n] = sum_l table[rows[n][l]]; table is (R, D).
template <typename T>
Var<T> embedding_sum(const Var<T>& table, const std::vector<std::vector<int>>& rows);

// out[n] = sum_c sum_k mask[k] * |DFT2(x[n,c])_k|^2 with mask in unshifted
// frequency layout (H, W).
template <typename T>
Var<T> masked_power(const Var<T>& x, const Tensor<T>& mask);

}  // namespace diffmark::ag

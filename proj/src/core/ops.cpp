#include "diffmark/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "diffmark/simd/kernels.hpp"

namespace diffmark::ag {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
bool wants(const Node<T>& n, std::size_t i) {
    return n.inputs[i]->requires_grad;
}

template <typename T>
Tensor<T>& gbuf(Node<T>& n, std::size_t i) {
    return n.inputs[i]->grad_buffer();
}

// Elementwise unary op with derivative expressed through (x, y).
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D df, const char* name) {
    Tensor<T> out(a.shape());
    const T* x = a.value().ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    return make_result<T>(std::move(out), {a},
                          [df](Node<T>& n) {
                              const T* xv = n.inputs[0]->value.ptr();
                              const T* yv = n.value.ptr();
                              const T* g = n.grad.ptr();
                              T* gx = gbuf(n, 0).ptr();
                              for (std::size_t i = 0; i < n.value.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
                          },
                          name);
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = a.value();
    simd::axpy<T>(out.size(), T(1), b.value().ptr(), out.ptr());
    return make_result<T>(std::move(out), {a, b},
                          [](Node<T>& n) {
                              for (std::size_t i = 0; i < 2; ++i)
                                  if (wants(n, i)) simd::axpy<T>(n.grad.size(), T(1), n.grad.ptr(), gbuf(n, i).ptr());
                          },
                          "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out = a.value();
    simd::axpy<T>(out.size(), T(-1), b.value().ptr(), out.ptr());
    return make_result<T>(std::move(out), {a, b},
                          [](Node<T>& n) {
                              if (wants(n, 0)) simd::axpy<T>(n.grad.size(), T(1), n.grad.ptr(), gbuf(n, 0).ptr());
                              if (wants(n, 1)) simd::axpy<T>(n.grad.size(), T(-1), n.grad.ptr(), gbuf(n, 1).ptr());
                          },
                          "sub");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_result<T>(std::move(out), {a, b},
                          [](Node<T>& n) {
                              const auto& av = n.inputs[0]->value;
                              const auto& bv = n.inputs[1]->value;
                              if (wants(n, 0)) {
                                  T* g = gbuf(n, 0).ptr();
                                  for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
                              }
                              if (wants(n, 1)) {
                                  T* g = gbuf(n, 1).ptr();
                                  for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
                              }
                          },
                          "mul");
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
    return make_result<T>(std::move(out), {a},
                          [s](Node<T>& n) { simd::axpy<T>(n.grad.size(), s, n.grad.ptr(), gbuf(n, 0).ptr()); },
                          "scale");
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v += s;
    return make_result<T>(std::move(out), {a},
                          [](Node<T>& n) { simd::axpy<T>(n.grad.size(), T(1), n.grad.ptr(), gbuf(n, 0).ptr()); },
                          "add_scalar");
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, const Var<T>& s) {
    if (s.size() != 1) throw ShapeError("mul_scalar: scale must have one element");
    const T sv = s.item();
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * sv;
    return make_result<T>(std::move(out), {a, s},
                          [](Node<T>& n) {
                              const T sv = n.inputs[1]->value[0];
                              if (wants(n, 0)) simd::axpy<T>(n.grad.size(), sv, n.grad.ptr(), gbuf(n, 0).ptr());
                              if (wants(n, 1))
                                  gbuf(n, 1)[0] += simd::dot<T>(n.grad.size(), n.grad.ptr(), n.inputs[0]->value.ptr());
                          },
                          "mul_scalar");
}

template <typename T>
Var<T> scale_rows(const Var<T>& a, const std::vector<T>& coeffs) {
    const int rows = a.dim(0);
    if (static_cast<int>(coeffs.size()) != rows) throw ShapeError("scale_rows: coefficient count mismatch");
    const std::size_t inner = a.size() / rows;
    Tensor<T> out(a.shape());
    for (int r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] = a.value()[r * inner + i] * coeffs[r];
    return make_result<T>(std::move(out), {a},
                          [coeffs, inner](Node<T>& n) {
                              T* g = gbuf(n, 0).ptr();
                              for (std::size_t r = 0; r < coeffs.size(); ++r)
                                  simd::axpy<T>(inner, coeffs[r], n.grad.ptr() + r * inner, g + r * inner);
                          },
                          "scale_rows");
}

template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
    if (v.shape().size() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1))
        throw ShapeError("add_channel: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    const int nc = x.dim(0) * x.dim(1);
    const std::size_t inner = x.size() / nc;
    Tensor<T> out = x.value();
    for (int i = 0; i < nc; ++i) {
        const T b = v.value()[i];
        for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] += b;
    }
    return make_result<T>(std::move(out), {x, v},
                          [nc, inner](Node<T>& n) {
                              if (wants(n, 0)) simd::axpy<T>(n.grad.size(), T(1), n.grad.ptr(), gbuf(n, 0).ptr());
                              if (wants(n, 1)) {
                                  T* g = gbuf(n, 1).ptr();
                                  for (int i = 0; i < nc; ++i) {
                                      T s = 0;
                                      for (std::size_t j = 0; j < inner; ++j) s += n.grad[i * inner + j];
                                      g[i] += s;
                                  }
                              }
                          },
                          "add_channel");
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    return unary<T>(
        a, [](T x) { return x / (T(1) + std::exp(-x)); },
        [](T x, T) {
            const T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) + x * (T(1) - s));
        },
        "silu");
}

template <typename T>
Var<T> exp(const Var<T>& a) {
    return unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
Var<T> log(const Var<T>& a) {
    return unary<T>(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; }, "log");
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
    return unary<T>(a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; }, "sqrt");
}

template <typename T>
Var<T> square(const Var<T>& a) {
    return unary<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; }, "square");
}

template <typename T>
Var<T> abs(const Var<T>& a) {
    return unary<T>(
        a, [](T x) { return std::abs(x); }, [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); }, "abs");
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
    return unary<T>(
        a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
        [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); }, "clamp");
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
    Tensor<T> out = a.value().reshaped(std::move(s));
    return make_result<T>(std::move(out), {a},
                          [](Node<T>& n) { simd::axpy<T>(n.grad.size(), T(1), n.grad.ptr(), gbuf(n, 0).ptr()); },
                          "reshape");
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
    Shape shape = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d)
            if (static_cast<int>(d) != axis && s[d] != shape[d])
                throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(shape));
        total += s[axis];
    }
    shape[axis] = total;
    Tensor<T> out(shape);
    const int outer = axis == 0 ? 1 : shape[0];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(static_cast<std::size_t>(p.shape()[axis]) * inner);
    const std::size_t row = static_cast<std::size_t>(total) * inner;
    for (int o = 0; o < outer; ++o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const T* src = parts[k].value().ptr() + o * widths[k];
            std::copy(src, src + widths[k], out.ptr() + o * row + off);
            off += widths[k];
        }
    }
    return make_result<T>(std::move(out), parts,
                          [outer, widths, row](Node<T>& n) {
                              for (int o = 0; o < outer; ++o) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                      if (wants(n, k))
                                          simd::axpy<T>(widths[k], T(1), n.grad.ptr() + o * row + off,
                                                        gbuf(n, k).ptr() + o * widths[k]);
                                      off += widths[k];
                                  }
                              }
                          },
                          "concat");
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, int start, int count) {
    const int rows = a.dim(0);
    if (start < 0 || count < 0 || start + count > rows) throw RangeError("slice_rows out of range");
    const std::size_t inner = a.size() / rows;
    Shape s = a.shape();
    s[0] = count;
    Tensor<T> out(s);
    std::copy(a.value().ptr() + start * inner, a.value().ptr() + (start + count) * inner, out.ptr());
    return make_result<T>(std::move(out), {a},
                          [start, inner](Node<T>& n) {
                              simd::axpy<T>(n.grad.size(), T(1), n.grad.ptr(), gbuf(n, 0).ptr() + start * inner);
                          },
                          "slice_rows");
}

template <typename T>
Var<T> repeat_channels(const Var<T>& x, int channels) {
    if (x.shape().size() != 4 || x.dim(1) != 1) throw ShapeError("repeat_channels expects (N,1,H,W)");
    const int nb = x.dim(0);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> out({nb, channels, x.dim(2), x.dim(3)});
    for (int b = 0; b < nb; ++b)
        for (int c = 0; c < channels; ++c)
            std::copy(x.value().ptr() + b * hw, x.value().ptr() + (b + 1) * hw, out.ptr() + (b * channels + c) * hw);
    return make_result<T>(std::move(out), {x},
                          [nb, channels, hw](Node<T>& n) {
                              T* g = gbuf(n, 0).ptr();
                              for (int b = 0; b < nb; ++b)
                                  for (int c = 0; c < channels; ++c)
                                      simd::axpy<T>(hw, T(1), n.grad.ptr() + (b * channels + c) * hw, g + b * hw);
                          },
                          "repeat_channels");
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    T s = 0;
    for (T v : a.value().data) s += v;
    return make_result<T>(Tensor<T>({1}, {s}), {a},
                          [](Node<T>& n) {
                              const T g = n.grad[0];
                              for (auto& v : gbuf(n, 0).data) v += g;
                          },
                          "sum");
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Var<T> mean_rows(const Var<T>& a) {
    const int rows = a.dim(0);
    const std::size_t inner = a.size() / rows;
    Tensor<T> out({rows});
    for (int r = 0; r < rows; ++r) {
        T s = 0;
        for (std::size_t i = 0; i < inner; ++i) s += a.value()[r * inner + i];
        out[r] = s / static_cast<T>(inner);
    }
    return make_result<T>(std::move(out), {a},
                          [rows, inner](Node<T>& n) {
                              T* g = gbuf(n, 0).ptr();
                              for (int r = 0; r < rows; ++r) {
                                  const T gr = n.grad[r] / static_cast<T>(inner);
                                  for (std::size_t i = 0; i < inner; ++i) g[r * inner + i] += gr;
                              }
                          },
                          "mean_rows");
}

template <typename T>
Var<T> max_rows(const Var<T>& a) {
    const int rows = a.dim(0);
    const std::size_t inner = a.size() / rows;
    Tensor<T> out({rows});
    std::vector<std::size_t> arg(rows);
    for (int r = 0; r < rows; ++r) {
        const T* p = a.value().ptr() + r * inner;
        const std::size_t k = static_cast<std::size_t>(std::max_element(p, p + inner) - p);
        arg[r] = r * inner + k;
        out[r] = p[k];
    }
    return make_result<T>(std::move(out), {a},
                          [arg](Node<T>& n) {
                              T* g = gbuf(n, 0).ptr();
                              for (std::size_t r = 0; r < arg.size(); ++r) g[arg[r]] += n.grad[r];
                          },
                          "max_rows");
}

template <typename T>
Var<T> mean_channels(const Var<T>& a) {
    if (a.shape().size() != 4) throw ShapeError("mean_channels expects NCHW");
    const int nb = a.dim(0), ch = a.dim(1);
    const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
    Tensor<T> out({nb, 1, a.dim(2), a.dim(3)});
    for (int b = 0; b < nb; ++b)
        for (int c = 0; c < ch; ++c)
            simd::axpy<T>(hw, T(1) / ch, a.value().ptr() + (b * ch + c) * hw, out.ptr() + b * hw);
    return make_result<T>(std::move(out), {a},
                          [nb, ch, hw](Node<T>& n) {
                              T* g = gbuf(n, 0).ptr();
                              for (int b = 0; b < nb; ++b)
                                  for (int c = 0; c < ch; ++c)
                                      simd::axpy<T>(hw, T(1) / ch, n.grad.ptr() + b * hw, g + (b * ch + c) * hw);
                          },
                          "mean_channels");
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || x.dim(1) != w.dim(1))
        throw ShapeError("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    const int nb = x.dim(0), in = x.dim(1), out_f = w.dim(0);
    Tensor<T> out({nb, out_f});
    simd::gemm<T>(false, true, nb, out_f, in, x.value().ptr(), in, w.value().ptr(), in, out.ptr(), out_f, false);
    const bool has_bias = b.defined();
    if (has_bias) {
        if (b.size() != static_cast<std::size_t>(out_f)) throw ShapeError("linear: bias size mismatch");
        for (int r = 0; r < nb; ++r) simd::axpy<T>(out_f, T(1), b.value().ptr(), out.ptr() + r * out_f);
    }
    std::vector<Var<T>> ins{x, w};
    if (has_bias) ins.push_back(b);
    return make_result<T>(std::move(out), ins,
                          [nb, in, out_f, has_bias](Node<T>& n) {
                              const T* g = n.grad.ptr();
                              if (wants(n, 0))
                                  simd::gemm<T>(false, false, nb, in, out_f, g, out_f, n.inputs[1]->value.ptr(), in,
                                                gbuf(n, 0).ptr(), in, true);
                              if (wants(n, 1))
                                  simd::gemm<T>(true, false, out_f, in, nb, g, out_f, n.inputs[0]->value.ptr(), in,
                                                gbuf(n, 1).ptr(), in, true);
                              if (has_bias && wants(n, 2)) {
                                  T* gb = gbuf(n, 2).ptr();
                                  for (int r = 0; r < nb; ++r) simd::axpy<T>(out_f, T(1), g + r * out_f, gb);
                              }
                          },
                          "linear");
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
    Tensor<T> out({m, nn});
    simd::gemm<T>(false, false, m, nn, k, a.value().ptr(), k, b.value().ptr(), nn, out.ptr(), nn, false);
    return make_result<T>(std::move(out), {a, b},
                          [m, k, nn](Node<T>& n) {
                              const T* g = n.grad.ptr();
                              if (wants(n, 0))
                                  simd::gemm<T>(false, true, m, k, nn, g, nn, n.inputs[1]->value.ptr(), nn,
                                                gbuf(n, 0).ptr(), k, true);
                              if (wants(n, 1))
                                  simd::gemm<T>(true, false, k, nn, m, n.inputs[0]->value.ptr(), k, g, nn,
                                                gbuf(n, 1).ptr(), nn, true);
                          },
                          "matmul");
}

namespace {

struct ConvGeom {
    int nb, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
    int rows() const { return cin * kh * kw; }
    int cols() const { return nb * ho * wo; }
};

// Output index range [lo, hi) whose input coordinate o*stride - pad + k lies
// inside [0, n).
inline void valid_range(int n, int out, int stride, int pad, int k, int& lo, int& hi) {
    lo = std::max(0, (pad - k + stride - 1) / stride);
    hi = std::min(out, (n - 1 + pad - k) / stride + 1);
    if (n - 1 + pad - k < 0) hi = 0;
    if (hi < lo) hi = lo;
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
    const int hw_out = g.ho * g.wo;
    const std::size_t ncols = static_cast<std::size_t>(g.cols());
    for (int c = 0; c < g.cin; ++c)
        for (int ky = 0; ky < g.kh; ++ky) {
            int y_lo, y_hi;
            valid_range(g.h, g.ho, g.stride, g.pad, ky, y_lo, y_hi);
            for (int kx = 0; kx < g.kw; ++kx) {
                int x_lo, x_hi;
                valid_range(g.w, g.wo, g.stride, g.pad, kx, x_lo, x_hi);
                T* dst = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * ncols;
                for (int b = 0; b < g.nb; ++b) {
                    const T* src = x + (static_cast<std::size_t>(b) * g.cin + c) * g.h * g.w;
                    T* d = dst + static_cast<std::size_t>(b) * hw_out;
                    std::fill(d, d + y_lo * g.wo, T(0));
                    for (int oy = y_lo; oy < y_hi; ++oy) {
                        T* drow = d + oy * g.wo;
                        const T* srow = src + (oy * g.stride - g.pad + ky) * g.w - g.pad + kx;
                        std::fill(drow, drow + x_lo, T(0));
                        if (g.stride == 1) {
                            std::copy(srow + x_lo, srow + x_hi, drow + x_lo);
                        } else {
                            for (int ox = x_lo; ox < x_hi; ++ox) drow[ox] = srow[ox * g.stride];
                        }
                        std::fill(drow + x_hi, drow + g.wo, T(0));
                    }
                    std::fill(d + y_hi * g.wo, d + hw_out, T(0));
                }
            }
        }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* dx) {
    const int hw_out = g.ho * g.wo;
    const std::size_t ncols = static_cast<std::size_t>(g.cols());
    for (int c = 0; c < g.cin; ++c)
        for (int ky = 0; ky < g.kh; ++ky) {
            int y_lo, y_hi;
            valid_range(g.h, g.ho, g.stride, g.pad, ky, y_lo, y_hi);
            for (int kx = 0; kx < g.kw; ++kx) {
                int x_lo, x_hi;
                valid_range(g.w, g.wo, g.stride, g.pad, kx, x_lo, x_hi);
                const T* srcrow = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * ncols;
                for (int b = 0; b < g.nb; ++b) {
                    T* dst = dx + (static_cast<std::size_t>(b) * g.cin + c) * g.h * g.w;
                    const T* s = srcrow + static_cast<std::size_t>(b) * hw_out;
                    for (int oy = y_lo; oy < y_hi; ++oy) {
                        T* drow = dst + (oy * g.stride - g.pad + ky) * g.w - g.pad + kx;
                        const T* srow = s + oy * g.wo;
                        if (g.stride == 1) {
                            for (int ox = x_lo; ox < x_hi; ++ox) drow[ox] += srow[ox];
                        } else {
                            for (int ox = x_lo; ox < x_hi; ++ox) drow[ox * g.stride] += srow[ox];
                        }
                    }
                }
            }
        }
}

// Scratch buffer without value-initialization.
template <typename T>
std::shared_ptr<T[]> scratch(std::size_t n) {
    return std::shared_ptr<T[]>(new T[n]);
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    if (x.shape().size() != 4 || w.shape().size() != 4 || x.dim(1) != w.dim(1))
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, pad, 0, 0};
    g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
    g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
    if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: empty output");
    const int rows = g.rows(), cols = g.cols(), hw_out = g.ho * g.wo;

    std::shared_ptr<T[]> col = scratch<T>(static_cast<std::size_t>(rows) * cols);
    im2col(x.value().ptr(), g, col.get());
    std::shared_ptr<T[]> omat = scratch<T>(static_cast<std::size_t>(g.cout) * cols);
    simd::gemm<T>(false, false, g.cout, cols, rows, w.value().ptr(), rows, col.get(), cols, omat.get(), cols, false);

    const bool has_bias = b.defined();
    Tensor<T> out({g.nb, g.cout, g.ho, g.wo});
    for (int bi = 0; bi < g.nb; ++bi)
        for (int co = 0; co < g.cout; ++co) {
            const T bias = has_bias ? b.value()[co] : T(0);
            const T* src = omat.get() + static_cast<std::size_t>(co) * cols + bi * hw_out;
            T* dst = out.ptr() + (static_cast<std::size_t>(bi) * g.cout + co) * hw_out;
            for (int i = 0; i < hw_out; ++i) dst[i] = src[i] + bias;
        }

    std::vector<Var<T>> ins{x, w};
    if (has_bias) ins.push_back(b);
    const bool need_col = grad_enabled() && w.requires_grad();
    if (!need_col) col.reset();
    omat.reset();
    return make_result<T>(
        std::move(out), ins,
        [g, has_bias, col = std::move(col)](Node<T>& n) {
            const int rows = g.rows(), cols = g.cols(), hw_out = g.ho * g.wo;
            std::unique_ptr<T[]> gmat(new T[static_cast<std::size_t>(g.cout) * cols]);
            for (int bi = 0; bi < g.nb; ++bi)
                for (int co = 0; co < g.cout; ++co)
                    std::copy(n.grad.ptr() + (static_cast<std::size_t>(bi) * g.cout + co) * hw_out,
                              n.grad.ptr() + (static_cast<std::size_t>(bi) * g.cout + co + 1) * hw_out,
                              gmat.get() + static_cast<std::size_t>(co) * cols + bi * hw_out);
            if (wants(n, 1))
                simd::gemm<T>(false, true, g.cout, rows, cols, gmat.get(), cols, col.get(), cols,
                              gbuf(n, 1).ptr(), rows, true);
            if (has_bias && wants(n, 2)) {
                T* gb = gbuf(n, 2).ptr();
                for (int co = 0; co < g.cout; ++co) {
                    T s = 0;
                    const T* r = gmat.get() + static_cast<std::size_t>(co) * cols;
                    for (int i = 0; i < cols; ++i) s += r[i];
                    gb[co] += s;
                }
            }
            if (wants(n, 0)) {
                std::unique_ptr<T[]> dcol(new T[static_cast<std::size_t>(rows) * cols]);
                simd::gemm<T>(true, false, rows, cols, g.cout, n.inputs[1]->value.ptr(), rows, gmat.get(), cols,
                              dcol.get(), cols, false);
                col2im(dcol.get(), g, gbuf(n, 0).ptr());
            }
        },
        "conv2d");
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    if (x.shape().size() != 4) throw ShapeError("upsample2x expects NCHW");
    const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out({x.dim(0), x.dim(1), 2 * h, 2 * w});
    for (int i = 0; i < nc; ++i)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out[(static_cast<std::size_t>(i) * 2 * h + y) * 2 * w + xx] =
                    x.value()[(static_cast<std::size_t>(i) * h + y / 2) * w + xx / 2];
    return make_result<T>(std::move(out), {x},
                          [nc, h, w](Node<T>& n) {
                              T* g = gbuf(n, 0).ptr();
                              for (int i = 0; i < nc; ++i)
                                  for (int y = 0; y < 2 * h; ++y)
                                      for (int xx = 0; xx < 2 * w; ++xx)
                                          g[(static_cast<std::size_t>(i) * h + y / 2) * w + xx / 2] +=
                                              n.grad[(static_cast<std::size_t>(i) * 2 * h + y) * 2 * w + xx];
                          },
                          "upsample2x");
}

template <typename T>
Var<T> avg_pool(const Var<T>& x, int k) {
    if (x.shape().size() != 4) throw ShapeError("avg_pool expects NCHW");
    const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    if (k > h || k > w || k < 1) throw ShapeError("avg_pool: kernel larger than input");
    const int ho = h - k + 1, wo = w - k + 1;
    const T inv = T(1) / static_cast<T>(k * k);
    Tensor<T> out({x.dim(0), x.dim(1), ho, wo});
    for (int i = 0; i < nc; ++i) {
        const T* src = x.value().ptr() + static_cast<std::size_t>(i) * h * w;
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                T s = 0;
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) s += src[(oy + dy) * w + ox + dx];
                out[(static_cast<std::size_t>(i) * ho + oy) * wo + ox] = s * inv;
            }
    }
    return make_result<T>(std::move(out), {x},
                          [nc, h, w, k, ho, wo, inv](Node<T>& n) {
                              T* g = gbuf(n, 0).ptr();
                              for (int i = 0; i < nc; ++i)
                                  for (int oy = 0; oy < ho; ++oy)
                                      for (int ox = 0; ox < wo; ++ox) {
                                          const T gv = n.grad[(static_cast<std::size_t>(i) * ho + oy) * wo + ox] * inv;
                                          T* dst = g + static_cast<std::size_t>(i) * h * w;
                                          for (int dy = 0; dy < k; ++dy)
                                              for (int dx = 0; dx < k; ++dx) dst[(oy + dy) * w + ox + dx] += gv;
                                      }
                          },
                          "avg_pool");
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum, T eps) {
    if (x.shape().size() != 4 && x.shape().size() != 2) throw ShapeError("batch_norm expects NCHW or NC");
    const int nb = x.dim(0), ch = x.dim(1);
    const std::size_t hw = x.size() / (static_cast<std::size_t>(nb) * ch);
    const std::size_t count = static_cast<std::size_t>(nb) * hw;
    std::vector<T> mu(ch), invstd(ch);
    const T* xv = x.value().ptr();
    if (training) {
        for (int c = 0; c < ch; ++c) {
            T s = 0;
            for (int b = 0; b < nb; ++b)
                for (std::size_t i = 0; i < hw; ++i) s += xv[(b * ch + c) * hw + i];
            const T m = s / static_cast<T>(count);
            T v = 0;
            for (int b = 0; b < nb; ++b)
                for (std::size_t i = 0; i < hw; ++i) {
                    const T d = xv[(b * ch + c) * hw + i] - m;
                    v += d * d;
                }
            v /= static_cast<T>(count);
            mu[c] = m;
            invstd[c] = T(1) / std::sqrt(v + eps);
            if (grad_enabled()) {
                const T unbiased = count > 1 ? v * static_cast<T>(count) / static_cast<T>(count - 1) : v;
                running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m;
                running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
            }
        }
    } else {
        for (int c = 0; c < ch; ++c) {
            mu[c] = running_mean[c];
            invstd[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }
    Tensor<T> xhat(x.shape());
    Tensor<T> out(x.shape());
    for (int b = 0; b < nb; ++b)
        for (int c = 0; c < ch; ++c)
            for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = (b * ch + c) * hw + i;
                xhat[idx] = (xv[idx] - mu[c]) * invstd[c];
                out[idx] = gamma.value()[c] * xhat[idx] + beta.value()[c];
            }
    return make_result<T>(
        std::move(out), {x, gamma, beta},
        [nb, ch, hw, count, training, invstd, xhat = std::move(xhat)](Node<T>& n) {
            const T* g = n.grad.ptr();
            const T* gam = n.inputs[1]->value.ptr();
            std::vector<T> sum_g(ch, T(0)), sum_gx(ch, T(0));
            for (int b = 0; b < nb; ++b)
                for (int c = 0; c < ch; ++c)
                    for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t idx = (b * ch + c) * hw + i;
                        sum_g[c] += g[idx];
                        sum_gx[c] += g[idx] * xhat[idx];
                    }
            if (wants(n, 1)) {
                T* gg = gbuf(n, 1).ptr();
                for (int c = 0; c < ch; ++c) gg[c] += sum_gx[c];
            }
            if (wants(n, 2)) {
                T* gb = gbuf(n, 2).ptr();
                for (int c = 0; c < ch; ++c) gb[c] += sum_g[c];
            }
            if (wants(n, 0)) {
                T* gx = gbuf(n, 0).ptr();
                const T inv_m = T(1) / static_cast<T>(count);
                for (int b = 0; b < nb; ++b)
                    for (int c = 0; c < ch; ++c)
                        for (std::size_t i = 0; i < hw; ++i) {
                            const std::size_t idx = (b * ch + c) * hw + i;
                            if (training)
                                gx[idx] += gam[c] * invstd[c] *
                                           (g[idx] - inv_m * sum_g[c] - xhat[idx] * inv_m * sum_gx[c]);
                            else
                                gx[idx] += gam[c] * invstd[c] * g[idx];
                        }
            }
        },
        "batch_norm");
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
    const std::size_t k = static_cast<std::size_t>(x.shape().back());
    const std::size_t rows = x.size() / k;
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* p = x.value().ptr() + r * k;
        const T m = *std::max_element(p, p + k);
        T s = 0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(p[j] - m);
        const T lse = m + std::log(s);
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = p[j] - lse;
    }
    return make_result<T>(std::move(out), {x},
                          [rows, k](Node<T>& n) {
                              T* g = gbuf(n, 0).ptr();
                              for (std::size_t r = 0; r < rows; ++r) {
                                  T gs = 0;
                                  for (std::size_t j = 0; j < k; ++j) gs += n.grad[r * k + j];
                                  for (std::size_t j = 0; j < k; ++j)
                                      g[r * k + j] += n.grad[r * k + j] - std::exp(n.value[r * k + j]) * gs;
                              }
                          },
                          "log_softmax");
}

template <typename T>
Var<T> embedding_sum(const Var<T>& table, const std::vector<std::vector<int>>& rows) {
    if (table.shape().size() != 2) throw ShapeError("embedding_sum: table must be 2-D");
    const int nrows = table.dim(0), d = table.dim(1);
    const int nb = static_cast<int>(rows.size());
    Tensor<T> out({nb, d});
    for (int b = 0; b < nb; ++b)
        for (int r : rows[b]) {
            if (r < 0 || r >= nrows) throw RangeError("embedding_sum: row index out of range");
            simd::axpy<T>(d, T(1), table.value().ptr() + static_cast<std::size_t>(r) * d, out.ptr() + b * d);
        }
    return make_result<T>(std::move(out), {table},
                          [rows, d](Node<T>& n) {
                              T* g = gbuf(n, 0).ptr();
                              for (std::size_t b = 0; b < rows.size(); ++b)
                                  for (int r : rows[b])
                                      simd::axpy<T>(d, T(1), n.grad.ptr() + b * d, g + static_cast<std::size_t>(r) * d);
                          },
                          "embedding_sum");
}

namespace {

// Separable 2-D DFT of a real or complex (re, im) image, optionally with
// conjugated twiddles (unnormalized inverse).
template <typename T>
void dft2(const T* re_in, const T* im_in, int h, int w, bool conj, T* re_out, T* im_out) {
    const T sgn = conj ? T(1) : T(-1);
    std::vector<T> tr(static_cast<std::size_t>(h) * w), ti(static_cast<std::size_t>(h) * w);
    std::vector<T> cw(w * w), sw(w * w), ch(h * h), sh(h * h);
    for (int a = 0; a < w; ++a)
        for (int b = 0; b < w; ++b) {
            const double ang = 2.0 * std::numbers::pi * ((a * b) % w) / w;
            cw[a * w + b] = static_cast<T>(std::cos(ang));
            sw[a * w + b] = static_cast<T>(std::sin(ang));
        }
    for (int a = 0; a < h; ++a)
        for (int b = 0; b < h; ++b) {
            const double ang = 2.0 * std::numbers::pi * ((a * b) % h) / h;
            ch[a * h + b] = static_cast<T>(std::cos(ang));
            sh[a * h + b] = static_cast<T>(std::sin(ang));
        }
    // rows: e^{sgn i theta} = cos + sgn i sin
    for (int y = 0; y < h; ++y)
        for (int k = 0; k < w; ++k) {
            T sr = 0, si = 0;
            for (int x = 0; x < w; ++x) {
                const T xr = re_in[y * w + x];
                const T xi = im_in ? im_in[y * w + x] : T(0);
                const T c = cw[k * w + x], s = sgn * sw[k * w + x];
                sr += xr * c - xi * s;
                si += xr * s + xi * c;
            }
            tr[y * w + k] = sr;
            ti[y * w + k] = si;
        }
    for (int k1 = 0; k1 < h; ++k1)
        for (int k2 = 0; k2 < w; ++k2) {
            T sr = 0, si = 0;
            for (int y = 0; y < h; ++y) {
                const T c = ch[k1 * h + y], s = sgn * sh[k1 * h + y];
                sr += tr[y * w + k2] * c - ti[y * w + k2] * s;
                si += tr[y * w + k2] * s + ti[y * w + k2] * c;
            }
            re_out[k1 * w + k2] = sr;
            im_out[k1 * w + k2] = si;
        }
}

}  // namespace

template <typename T>
Var<T> masked_power(const Var<T>& x, const Tensor<T>& mask) {
    if (x.shape().size() != 4) throw ShapeError("masked_power expects NCHW");
    const int nb = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (mask.shape != Shape{h, w}) throw ShapeError("masked_power: mask shape mismatch");
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Tensor<T> out({nb});
    std::vector<T> spec_re(static_cast<std::size_t>(nb) * ch * hw), spec_im(spec_re.size());
    for (int b = 0; b < nb; ++b)
        for (int c = 0; c < ch; ++c) {
            const std::size_t off = (static_cast<std::size_t>(b) * ch + c) * hw;
            dft2<T>(x.value().ptr() + off, nullptr, h, w, false, spec_re.data() + off, spec_im.data() + off);
            T s = 0;
            for (std::size_t k = 0; k < hw; ++k)
                s += mask[k] * (spec_re[off + k] * spec_re[off + k] + spec_im[off + k] * spec_im[off + k]);
            out[b] += s;
        }
    return make_result<T>(std::move(out), {x},
                          [nb, ch, h, w, hw, mask, spec_re = std::move(spec_re), spec_im = std::move(spec_im)](Node<T>& n) {
                              T* g = gbuf(n, 0).ptr();
                              std::vector<T> gr(hw), gi(hw), rr(hw), ri(hw);
                              for (int b = 0; b < nb; ++b)
                                  for (int c = 0; c < ch; ++c) {
                                      const std::size_t off = (static_cast<std::size_t>(b) * ch + c) * hw;
                                      for (std::size_t k = 0; k < hw; ++k) {
                                          gr[k] = mask[k] * spec_re[off + k];
                                          gi[k] = mask[k] * spec_im[off + k];
                                      }
                                      dft2<T>(gr.data(), gi.data(), h, w, true, rr.data(), ri.data());
                                      const T up = T(2) * n.grad[b];
                                      for (std::size_t k = 0; k < hw; ++k) g[off + k] += up * rr[k];
                                  }
                          },
                          "masked_power");
}

#define DIFFMARK_INSTANTIATE_OPS(T)                                                                      \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                   \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                                   \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                   \
    template Var<T> scale(const Var<T>&, T);                                                             \
    template Var<T> add_scalar(const Var<T>&, T);                                                        \
    template Var<T> mul_scalar(const Var<T>&, const Var<T>&);                                            \
    template Var<T> scale_rows(const Var<T>&, const std::vector<T>&);                                    \
    template Var<T> add_channel(const Var<T>&, const Var<T>&);                                           \
    template Var<T> silu(const Var<T>&);                                                                 \
    template Var<T> exp(const Var<T>&);                                                                  \
    template Var<T> log(const Var<T>&);                                                                  \
    template Var<T> sqrt(const Var<T>&);                                                                 \
    template Var<T> square(const Var<T>&);                                                               \
    template Var<T> abs(const Var<T>&);                                                                  \
    template Var<T> clamp(const Var<T>&, T, T);                                                          \
    template Var<T> reshape(const Var<T>&, Shape);                                                       \
    template Var<T> concat(const std::vector<Var<T>>&, int);                                             \
    template Var<T> slice_rows(const Var<T>&, int, int);                                                 \
    template Var<T> repeat_channels(const Var<T>&, int);                                                 \
    template Var<T> sum(const Var<T>&);                                                                  \
    template Var<T> mean(const Var<T>&);                                                                 \
    template Var<T> mean_rows(const Var<T>&);                                                            \
    template Var<T> max_rows(const Var<T>&);                                                             \
    template Var<T> mean_channels(const Var<T>&);                                                        \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                 \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                                \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                       \
    template Var<T> upsample2x(const Var<T>&);                                                           \
    template Var<T> avg_pool(const Var<T>&, int);                                                        \
    template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, bool, \
                               T, T);                                                                    \
    template Var<T> log_softmax(const Var<T>&);                                                          \
    template Var<T> embedding_sum(const Var<T>&, const std::vector<std::vector<int>>&);                  \
    template Var<T> masked_power(const Var<T>&, const Tensor<T>&);

DIFFMARK_INSTANTIATE_OPS(float)
DIFFMARK_INSTANTIATE_OPS(double)

}  // namespace diffmark::ag

#pragma once

// Batched layer kernels with analytic backward passes. Image tensors are
// N x C x H x W, dense activations N x features. Convolutions lower to GEMM
// through im2col / col2im.

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "softsense/nn/blas.hpp"
#include "softsense/nn/tensor.hpp"

namespace softsense::nn {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// floor((in + 2p - k) / s) + 1
inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("stride must be >= 1");
  if (in + 2 * pad < kernel) throw ShapeError("kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

// col[(c*kh + ky)*kw + kx][n*oh*ow + oy*ow + ox] = x[n][c][oy*s - p + ky][ox*s - p + kx]
template <typename T>
void im2col(const T* x, std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, const ConvGeometry& g, std::size_t oh, std::size_t ow, T* col) {
  const std::size_t plane = oh * ow;
  const std::size_t ncols = n * plane;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((ch * kh + ky) * kw + kx) * ncols;
        for (std::size_t b = 0; b < n; ++b) {
          const T* src = x + (b * c + ch) * h * w;
          T* dst = row + b * plane;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            T* out = dst + oy * ow;
            if (iy < 0 || iy >= static_cast<long>(h)) {
              std::fill(out, out + ow, T(0));
              continue;
            }
            const T* line = src + static_cast<std::size_t>(iy) * w;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              out[ox] = (ix >= 0 && ix < static_cast<long>(w)) ? line[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into x (x must be zeroed).
template <typename T>
void col2im(const T* col, std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, const ConvGeometry& g, std::size_t oh, std::size_t ow, T* x) {
  const std::size_t plane = oh * ow;
  const std::size_t ncols = n * plane;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = col + ((ch * kh + ky) * kw + kx) * ncols;
        for (std::size_t b = 0; b < n; ++b) {
          T* dst = x + (b * c + ch) * h * w;
          const T* src = row + b * plane;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            T* line = dst + static_cast<std::size_t>(iy) * w;
            const T* in = src + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(w)) line[ix] += in[ox];
            }
          }
        }
      }
    }
  }
}

// [N, C, P] -> [C, N*P]
template <typename T>
void to_channel_major(const T* x, std::size_t n, std::size_t c, std::size_t p, T* out) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) std::copy_n(x + (b * c + ch) * p, p, out + ch * n * p + b * p);
}

// [C, N*P] -> [N, C, P]
template <typename T>
void from_channel_major(const T* x, std::size_t n, std::size_t c, std::size_t p, T* out) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) std::copy_n(x + ch * n * p + b * p, p, out + (b * c + ch) * p);
}

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                                         ", got " + shape_str(s));
}

}  // namespace detail

template <typename T>
struct ParamGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;
};

// ---------------------------------------------------------------------------
// conv2d: x [N, Cin, H, W], w [Cout, Cin, kh, kw], b [Cout] -> [N, Cout, H', W']
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvGeometry& g) {
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(w.shape(), 4, "conv2d weight");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) throw ShapeError("conv2d: weight input channels " + std::to_string(w.dim(1)) +
                                        " != input channels " + std::to_string(cin));
  require_shape(b.shape(), {cout}, "conv2d bias");
  const std::size_t oh = conv_out_size(h, kh, g.stride, g.pad), ow = conv_out_size(wd, kw, g.stride, g.pad);
  const std::size_t k = cin * kh * kw, cols = n * oh * ow;

  std::vector<T> col(k * cols);
  detail::im2col(x.data(), n, cin, h, wd, kh, kw, g, oh, ow, col.data());
  std::vector<T> ymat(cout * cols);
  gemm(false, false, cout, cols, k, T(1), w.data(), k, col.data(), cols, T(0), ymat.data(), cols);
  Tensor<T> y({n, cout, oh, ow});
  detail::from_channel_major(ymat.data(), n, cout, oh * ow, y.data());
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t co = 0; co < cout; ++co) {
      T* p = y.data() + (bi * cout + co) * oh * ow;
      for (std::size_t i = 0; i < oh * ow; ++i) p[i] += b[co];
    }
  return y;
}

template <typename T>
ParamGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                              const ConvGeometry& g) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = conv_out_size(h, kh, g.stride, g.pad), ow = conv_out_size(wd, kw, g.stride, g.pad);
  require_shape(dy.shape(), {n, cout, oh, ow}, "conv2d output gradient");
  const std::size_t k = cin * kh * kw, cols = n * oh * ow;

  std::vector<T> col(k * cols);
  detail::im2col(x.data(), n, cin, h, wd, kh, kw, g, oh, ow, col.data());
  std::vector<T> dymat(cout * cols);
  detail::to_channel_major(dy.data(), n, cout, oh * ow, dymat.data());

  ParamGrads<T> out{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({cout})};
  gemm(false, true, cout, k, cols, T(1), dymat.data(), cols, col.data(), cols, T(0), out.dw.data(), k);
  for (std::size_t co = 0; co < cout; ++co) {
    T s = 0;
    for (std::size_t i = 0; i < cols; ++i) s += dymat[co * cols + i];
    out.db[co] = s;
  }
  gemm(true, false, k, cols, cout, T(1), w.data(), k, dymat.data(), cols, T(0), col.data(), cols);
  detail::col2im(col.data(), n, cin, h, wd, kh, kw, g, oh, ow, out.dx.data());
  return out;
}

// ---------------------------------------------------------------------------
// conv2d_transpose: x [N, Cin, H, W], w [Cin, Cout, kh, kw], b [Cout]
//   -> [N, Cout, out_h, out_w]
// The exact adjoint of conv2d(., w, geometry) acting on an out_h x out_w
// input. Relative to the full (H-1)s + k output, the first `pad` rows/columns
// and whatever remains past out_h/out_w on the right/bottom are cropped.
// ---------------------------------------------------------------------------

inline void check_transpose_target(std::size_t in, std::size_t kernel, const ConvGeometry& g, std::size_t target) {
  // Rows of the target that no forward window touches are simply zero, so the
  // only requirement is that a forward conv on `target` gives back `in`.
  if (target + 2 * g.pad < kernel || conv_out_size(target, kernel, g.stride, g.pad) != in) {
    const std::size_t full = (in - 1) * g.stride + kernel;
    throw ShapeError("conv2d_transpose: target size " + std::to_string(target) + " is not a crop of the " +
                     std::to_string(full) + "-wide produced size for input " + std::to_string(in));
  }
}

template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvGeometry& g,
                           std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x.shape(), 4, "conv2d_transpose input");
  detail::require_rank(w.shape(), 4, "conv2d_transpose weight");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != cin) throw ShapeError("conv2d_transpose: weight input channels mismatch");
  require_shape(b.shape(), {cout}, "conv2d_transpose bias");
  check_transpose_target(h, kh, g, out_h);
  check_transpose_target(wd, kw, g, out_w);
  const std::size_t k = cout * kh * kw, cols = n * h * wd;

  std::vector<T> xmat(cin * cols);
  detail::to_channel_major(x.data(), n, cin, h * wd, xmat.data());
  std::vector<T> col(k * cols);
  gemm(true, false, k, cols, cin, T(1), w.data(), k, xmat.data(), cols, T(0), col.data(), cols);
  Tensor<T> y({n, cout, out_h, out_w});
  detail::col2im(col.data(), n, cout, out_h, out_w, kh, kw, g, h, wd, y.data());
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t co = 0; co < cout; ++co) {
      T* p = y.data() + (bi * cout + co) * out_h * out_w;
      for (std::size_t i = 0; i < out_h * out_w; ++i) p[i] += b[co];
    }
  return y;
}

template <typename T>
ParamGrads<T> conv2d_transpose_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                                        const ConvGeometry& g) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  detail::require_rank(dy.shape(), 4, "conv2d_transpose output gradient");
  if (dy.dim(0) != n || dy.dim(1) != cout) throw ShapeError("conv2d_transpose: gradient shape mismatch");
  const std::size_t out_h = dy.dim(2), out_w = dy.dim(3);
  check_transpose_target(h, kh, g, out_h);
  check_transpose_target(wd, kw, g, out_w);
  const std::size_t k = cout * kh * kw, cols = n * h * wd;

  std::vector<T> col(k * cols);
  detail::im2col(dy.data(), n, cout, out_h, out_w, kh, kw, g, h, wd, col.data());
  std::vector<T> xmat(cin * cols);
  detail::to_channel_major(x.data(), n, cin, h * wd, xmat.data());

  ParamGrads<T> out{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({cout})};
  std::vector<T> dxmat(cin * cols);
  gemm(false, false, cin, cols, k, T(1), w.data(), k, col.data(), cols, T(0), dxmat.data(), cols);
  detail::from_channel_major(dxmat.data(), n, cin, h * wd, out.dx.data());
  gemm(false, true, cin, k, cols, T(1), xmat.data(), cols, col.data(), cols, T(0), out.dw.data(), k);
  const std::size_t plane = out_h * out_w;
  for (std::size_t co = 0; co < cout; ++co) {
    T s = 0;
    for (std::size_t bi = 0; bi < n; ++bi) {
      const T* p = dy.data() + (bi * cout + co) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
    }
    out.db[co] = s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// dense: x [N, in], w [out, in], b [out] -> [N, out]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(x.shape(), 2, "dense input");
  detail::require_rank(w.shape(), 2, "dense weight");
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in) throw ShapeError("dense: weight expects " + std::to_string(w.dim(1)) + " inputs, got " +
                                       std::to_string(in));
  require_shape(b.shape(), {out}, "dense bias");
  Tensor<T> y({n, out});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(b.data(), out, y.data() + i * out);
  gemm(false, true, n, out, in, T(1), x.data(), in, w.data(), in, T(1), y.data(), out);
  return y;
}

template <typename T>
ParamGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy) {
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  require_shape(dy.shape(), {n, out}, "dense output gradient");
  ParamGrads<T> g{Tensor<T>({n, in}), Tensor<T>({out, in}), Tensor<T>({out})};
  gemm(false, false, n, in, out, T(1), dy.data(), out, w.data(), in, T(0), g.dx.data(), in);
  gemm(true, false, out, in, n, T(1), dy.data(), out, x.data(), in, T(0), g.dw.data(), in);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) g.db[j] += dy[i * out + j];
  return g;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
T logistic(T z) {
  // Split by sign so exp never overflows.
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> relu(Tensor<T> x) {
  for (auto& v : x.vec()) v = v > T(0) ? v : T(0);
  return x;
}

/// Gradient through ReLU given its output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, Tensor<T> dy) {
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (!(y[i] > T(0))) dy[i] = T(0);
  return dy;
}

template <typename T>
Tensor<T> logistic(Tensor<T> x) {
  for (auto& v : x.vec()) v = logistic(v);
  return x;
}

/// Gradient through the logistic function given its output.
template <typename T>
Tensor<T> logistic_backward(const Tensor<T>& y, Tensor<T> dy) {
  for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= y[i] * (T(1) - y[i]);
  return dy;
}

// ---------------------------------------------------------------------------
// Binary cross-entropy, mean over all elements, predictions clipped to
// [eps, 1 - eps].
// ---------------------------------------------------------------------------

inline constexpr double kBceEpsilon = 1e-7;

template <typename P, typename Q>
double bce_loss(std::span<const P> prediction, std::span<const Q> target, double eps = kBceEpsilon) {
  if (prediction.size() != target.size()) throw ShapeError("bce_loss: prediction/target length mismatch");
  if (prediction.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double p = std::clamp(static_cast<double>(prediction[i]), eps, 1.0 - eps);
    const double t = static_cast<double>(target[i]);
    // Skipping zero-weight terms gives identical sums for binary targets at half the cost.
    if (t != 0.0) sum -= t * std::log(p);
    if (t != 1.0) sum -= (1.0 - t) * std::log(1.0 - p);
  }
  return sum / static_cast<double>(prediction.size());
}

template <typename T>
double bce_loss(const Tensor<T>& prediction, const Tensor<T>& target, double eps = kBceEpsilon) {
  require_shape(target.shape(), prediction.shape(), "bce_loss target");
  return bce_loss<T, T>(prediction.span(), target.span(), eps);
}

/// dLoss/dPrediction; zero where the prediction is clipped.
template <typename T>
Tensor<T> bce_grad(const Tensor<T>& prediction, const Tensor<T>& target, double eps = kBceEpsilon) {
  require_shape(target.shape(), prediction.shape(), "bce_grad target");
  Tensor<T> g(prediction.shape());
  const double n = static_cast<double>(prediction.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double p = prediction[i];
    if (p < eps || p > 1.0 - eps) continue;
    const double t = target[i];
    g[i] = static_cast<T>((-t / p + (1.0 - t) / (1.0 - p)) / n);
  }
  return g;
}

/// Gradient of bce_loss(logistic(z), t) with respect to the logits z, without
/// the clipping dead zone: (logistic(z) - t) / n.
template <typename T>
Tensor<T> bce_logits_grad(const Tensor<T>& probabilities, const Tensor<T>& target) {
  require_shape(target.shape(), probabilities.shape(), "bce_logits_grad target");
  Tensor<T> g(probabilities.shape());
  const T inv_n = T(1) / static_cast<T>(probabilities.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = (probabilities[i] - target[i]) * inv_n;
  return g;
}

}  // namespace softsense::nn

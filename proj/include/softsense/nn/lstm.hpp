#pragma once

// Single-layer LSTM with batched forward and backpropagation through time.
// Gate rows of the fused weight are ordered input, forget, candidate, output.

#include <cmath>
#include <vector>

#include "softsense/nn/layers.hpp"

namespace softsense::nn {

template <typename T>
struct LstmParams {
  Tensor<T> weight;  // [4H, I + H]
  Tensor<T> bias;    // [4H]

  [[nodiscard]] std::size_t hidden() const { return bias.size() / 4; }
  [[nodiscard]] std::size_t input() const { return weight.dim(1) - hidden(); }

  void validate() const {
    if (weight.rank() != 2 || bias.rank() != 1 || bias.size() % 4 != 0 || weight.dim(0) != bias.size() ||
        weight.dim(1) <= hidden()) {
      throw ShapeError("lstm: weight " + shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()) +
                       " do not form 4 gates x hidden x (input + hidden)");
    }
  }
};

template <typename T>
struct LstmStep {
  Tensor<T> xh;      // [N, I + H] concatenated input and previous hidden state
  Tensor<T> gates;   // [N, 4H] activated i, f, g, o
  Tensor<T> c_prev;  // [N, H]
  Tensor<T> c;       // [N, H]
  Tensor<T> tanh_c;  // [N, H]
  Tensor<T> h;       // [N, H]
};

/// One cell update. h_prev/c_prev are [N, H], x is [N, I].
template <typename T>
LstmStep<T> lstm_cell(const Tensor<T>& x, const Tensor<T>& h_prev, const Tensor<T>& c_prev,
                      const LstmParams<T>& p) {
  p.validate();
  const std::size_t hid = p.hidden(), in = p.input();
  if (x.rank() != 2 || x.dim(1) != in) throw ShapeError("lstm_cell: input must be [N, " + std::to_string(in) + "]");
  const std::size_t n = x.dim(0);
  require_shape(h_prev.shape(), {n, hid}, "lstm_cell h_prev");
  require_shape(c_prev.shape(), {n, hid}, "lstm_cell c_prev");

  LstmStep<T> s;
  s.xh = Tensor<T>({n, in + hid});
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(x.data() + b * in, in, s.xh.data() + b * (in + hid));
    std::copy_n(h_prev.data() + b * hid, hid, s.xh.data() + b * (in + hid) + in);
  }
  s.gates = dense(s.xh, p.weight, p.bias);
  s.c_prev = c_prev;
  s.c = Tensor<T>({n, hid});
  s.tanh_c = Tensor<T>({n, hid});
  s.h = Tensor<T>({n, hid});
  for (std::size_t b = 0; b < n; ++b) {
    T* z = s.gates.data() + b * 4 * hid;
    for (std::size_t j = 0; j < hid; ++j) {
      const T i = logistic(z[j]);
      const T f = logistic(z[hid + j]);
      const T g = std::tanh(z[2 * hid + j]);
      const T o = logistic(z[3 * hid + j]);
      z[j] = i;
      z[hid + j] = f;
      z[2 * hid + j] = g;
      z[3 * hid + j] = o;
      const std::size_t k = b * hid + j;
      s.c[k] = f * c_prev[k] + i * g;
      s.tanh_c[k] = std::tanh(s.c[k]);
      s.h[k] = o * s.tanh_c[k];
    }
  }
  return s;
}

/// Runs a window x [N, T, I] from zero initial state; returns every step.
template <typename T>
std::vector<LstmStep<T>> lstm_forward(const Tensor<T>& xs, const LstmParams<T>& p) {
  if (xs.rank() != 3) throw ShapeError("lstm_forward: input must be [N, T, I]");
  const std::size_t n = xs.dim(0), steps = xs.dim(1), in = xs.dim(2), hid = p.hidden();
  std::vector<LstmStep<T>> trace;
  trace.reserve(steps);
  Tensor<T> h({n, hid}), c({n, hid}), x({n, in});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < n; ++b) std::copy_n(xs.data() + (b * steps + t) * in, in, x.data() + b * in);
    trace.push_back(lstm_cell(x, h, c, p));
    h = trace.back().h;
    c = trace.back().c;
  }
  return trace;
}

template <typename T>
struct LstmGrads {
  Tensor<T> dxs;     // [N, T, I]
  Tensor<T> weight;  // [4H, I + H]
  Tensor<T> bias;    // [4H]
};

/// Backpropagation through time. `dh` holds one [N, H] gradient per step
/// (empty tensors mean zero); typically only the last step is non-zero.
template <typename T>
LstmGrads<T> lstm_backward(const std::vector<LstmStep<T>>& trace, const LstmParams<T>& p,
                           const std::vector<Tensor<T>>& dh) {
  if (trace.empty()) throw ShapeError("lstm_backward: empty trace");
  if (dh.size() != trace.size()) throw ShapeError("lstm_backward: need one hidden gradient per step");
  const std::size_t n = trace.front().h.dim(0), hid = p.hidden(), in = p.input(), steps = trace.size();
  LstmGrads<T> g{Tensor<T>({n, steps, in}), Tensor<T>(p.weight.shape()), Tensor<T>(p.bias.shape())};
  Tensor<T> dh_next({n, hid}), dc_next({n, hid}), dz({n, 4 * hid}), dxh({n, in + hid});

  for (std::size_t t = steps; t-- > 0;) {
    const LstmStep<T>& s = trace[t];
    for (std::size_t b = 0; b < n; ++b) {
      const T* gate = s.gates.data() + b * 4 * hid;
      T* d = dz.data() + b * 4 * hid;
      for (std::size_t j = 0; j < hid; ++j) {
        const std::size_t k = b * hid + j;
        const T i = gate[j], f = gate[hid + j], cand = gate[2 * hid + j], o = gate[3 * hid + j];
        const T dht = dh_next[k] + (dh[t].size() ? dh[t][k] : T(0));
        const T tc = s.tanh_c[k];
        const T dc = dc_next[k] + dht * o * (T(1) - tc * tc);
        d[j] = dc * cand * i * (T(1) - i);
        d[hid + j] = dc * s.c_prev[k] * f * (T(1) - f);
        d[2 * hid + j] = dc * i * (T(1) - cand * cand);
        d[3 * hid + j] = dht * tc * o * (T(1) - o);
        dc_next[k] = dc * f;
      }
    }
    gemm(true, false, 4 * hid, in + hid, n, T(1), dz.data(), 4 * hid, s.xh.data(), in + hid, T(1),
         g.weight.data(), in + hid);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < 4 * hid; ++j) g.bias[j] += dz[b * 4 * hid + j];
    gemm(false, false, n, in + hid, 4 * hid, T(1), dz.data(), 4 * hid, p.weight.data(), in + hid, T(0),
         dxh.data(), in + hid);
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(dxh.data() + b * (in + hid), in, g.dxs.data() + (b * steps + t) * in);
      std::copy_n(dxh.data() + b * (in + hid) + in, hid, dh_next.data() + b * hid);
    }
  }
  return g;
}

}  // namespace softsense::nn

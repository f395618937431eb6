#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "softsense/nn/tensor.hpp"

namespace softsense::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// Bias-corrected Adam step applied elementwise to every (param, grad) pair.
/// Moments are allocated on the first call and must keep their shapes.
template <typename T>
void adam_update(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
                 AdamState<T>& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_update: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const Tensor<T>* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_update: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_shape(grads[i]->shape(), params[i]->shape(), "adam_update gradient");
    require_shape(state.m[i].shape(), params[i]->shape(), "adam_update moment");
  }

  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T step_size = static_cast<T>(c.lr / bias1);
  const T inv_sqrt_bias2 = static_cast<T>(1.0 / std::sqrt(bias2));
  const T eps = static_cast<T>(c.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->data();
    const T* g = grads[i]->data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    for (std::size_t k = 0; k < params[i]->size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      p[k] -= step_size * m[k] / (std::sqrt(v[k]) * inv_sqrt_bias2 + eps);
    }
  }
}

}  // namespace softsense::nn

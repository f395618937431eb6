#pragma once

// Per-channel min-max normalisation and the latent feature mask (features
// whose training-split spread is below a threshold are held at their mean).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "softsense/errors.hpp"

namespace softsense {

struct Normalizer {
  std::vector<double> min;
  std::vector<double> max;

  [[nodiscard]] std::size_t channels() const { return min.size(); }

  /// Fits from row-major data with `channels` columns.
  static Normalizer fit(std::span<const double> data, std::size_t channels) {
    if (channels == 0 || data.empty() || data.size() % channels != 0) {
      throw ConfigError("normalizer needs non-empty data with a whole number of rows");
    }
    Normalizer n;
    n.min.assign(channels, std::numeric_limits<double>::infinity());
    n.max.assign(channels, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::size_t c = i % channels;
      n.min[c] = std::min(n.min[c], data[i]);
      n.max[c] = std::max(n.max[c], data[i]);
    }
    return n;
  }

  /// Maps [min, max] onto [0, 1]; a constant channel maps to 0.5.
  [[nodiscard]] double apply(double x, std::size_t c) const {
    const double range = max[c] - min[c];
    return range > 0.0 ? (x - min[c]) / range : 0.5;
  }
  [[nodiscard]] double invert(double y, std::size_t c) const {
    const double range = max[c] - min[c];
    return range > 0.0 ? min[c] + y * range : min[c];
  }

  [[nodiscard]] std::vector<double> apply_rows(std::span<const double> data) const {
    std::vector<double> out(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = apply(data[i], i % channels());
    return out;
  }
};

struct FeatureMask {
  std::vector<std::uint8_t> active;  // 1 = feature kept for the sequence model
  std::vector<double> means;         // training-split mean of every feature

  [[nodiscard]] std::size_t full_size() const { return active.size(); }
  [[nodiscard]] std::size_t active_count() const {
    return static_cast<std::size_t>(std::count(active.begin(), active.end(), std::uint8_t{1}));
  }
  [[nodiscard]] std::vector<std::size_t> active_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < active.size(); ++i)
      if (active[i]) idx.push_back(i);
    return idx;
  }

  [[nodiscard]] std::vector<double> mask(std::span<const double> full) const {
    if (full.size() != full_size()) throw ShapeError("mask: latent length mismatch");
    std::vector<double> out;
    out.reserve(active_count());
    for (std::size_t i = 0; i < full.size(); ++i)
      if (active[i]) out.push_back(full[i]);
    return out;
  }

  /// Full-length latent with masked slots restored to their stored means.
  [[nodiscard]] std::vector<double> unmask(std::span<const double> reduced) const {
    if (reduced.size() != active_count()) throw ShapeError("unmask: active feature count mismatch");
    std::vector<double> out(means);
    std::size_t k = 0;
    for (std::size_t i = 0; i < out.size(); ++i)
      if (active[i]) out[i] = reduced[k++];
    return out;
  }
};

/// Feature i is active iff its (population) standard deviation over the rows
/// of `latents` is at least `threshold`.
inline FeatureMask build_feature_mask(std::span<const double> latents, std::size_t features, double threshold = 1e-3) {
  if (features == 0 || latents.empty() || latents.size() % features != 0) {
    throw ConfigError("feature mask needs a non-empty latent matrix");
  }
  const std::size_t rows = latents.size() / features;
  FeatureMask m;
  m.active.assign(features, 0);
  m.means.assign(features, 0.0);
  std::vector<double> sq(features, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t f = 0; f < features; ++f) m.means[f] += latents[r * features + f];
  for (double& v : m.means) v /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t f = 0; f < features; ++f) {
      const double d = latents[r * features + f] - m.means[f];
      sq[f] += d * d;
    }
  for (std::size_t f = 0; f < features; ++f) {
    m.active[f] = std::sqrt(sq[f] / static_cast<double>(rows)) >= threshold ? 1 : 0;
  }
  if (m.active_count() == 0) {
    throw ConfigError("every latent feature is below the variance threshold; lower mask_threshold");
  }
  return m;
}

}  // namespace softsense

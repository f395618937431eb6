#pragma once

// Dataset splitting, the two training loops and the evaluation metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "softsense/errors.hpp"
#include "softsense/models.hpp"
#include "softsense/nn/adam.hpp"
#include "softsense/preprocess.hpp"

namespace softsense {

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  [[nodiscard]] std::size_t size() const { return end - begin; }
  [[nodiscard]] bool contains(std::size_t i) const { return i >= begin && i < end; }
  [[nodiscard]] std::vector<std::size_t> indices() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), begin);
    return idx;
  }
};

struct SplitSpec {
  double train_seconds = 85.0;
  double test_seconds = 10.0;
  double eval_seconds = 5.0;
  double record_dt = 0.01;

  [[nodiscard]] std::size_t steps(double seconds) const {
    const double n = seconds / record_dt;
    const double r = std::round(n);
    if (std::abs(n - r) > 1e-6 || r < 1.0) {
      throw ConfigError("split length " + std::to_string(seconds) + " s is not a positive whole number of steps");
    }
    return static_cast<std::size_t>(r);
  }
  [[nodiscard]] std::size_t total() const { return steps(train_seconds) + steps(test_seconds) + steps(eval_seconds); }
};

struct Splits {
  Range train, test, eval;
};

/// Contiguous, ordered, disjoint ranges over `frames` aligned timesteps.
/// Frames and sensor rows must agree and cover at least the split total;
/// anything beyond it (the final recorded state) is left unused.
inline Splits split_dataset(std::size_t frames, std::size_t sensor_rows, const SplitSpec& spec) {
  if (frames != sensor_rows) {
    throw ConfigError("frames (" + std::to_string(frames) + ") and sensor rows (" + std::to_string(sensor_rows) +
                      ") are misaligned");
  }
  const std::size_t a = spec.steps(spec.train_seconds), b = spec.steps(spec.test_seconds),
                    c = spec.steps(spec.eval_seconds);
  if (frames < a + b + c) {
    throw ConfigError("dataset has " + std::to_string(frames) + " steps, splits need " + std::to_string(a + b + c));
  }
  return {{0, a}, {a, a + b}, {a + b, a + b + c}};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::size_t batch_size = 64;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  nn::AdamConfig adam;
  double latent_noise = 0.0;  // AE only: std of logit noise during training
  std::function<void(std::size_t epoch, double train, double test)> on_epoch;
};

struct LossCurve {
  std::vector<double> train;
  std::vector<double> test;
  std::size_t best_epoch = 0;  // 1-based
  double best_test = 0.0;
};

namespace detail {

template <typename T>
std::vector<Tensor<T>> snapshot(const std::vector<NamedParam<T>>& params) {
  std::vector<Tensor<T>> out;
  for (const auto& p : params) out.push_back(*p.value);
  return out;
}

template <typename T>
void restore(const std::vector<NamedParam<T>>& params, const std::vector<Tensor<T>>& saved) {
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = saved[i];
}

template <typename T>
void adam_step(const std::vector<NamedParam<T>>& params, nn::AdamState<T>& state) {
  std::vector<Tensor<T>*> values;
  std::vector<const Tensor<T>*> grads;
  for (const auto& p : params) {
    values.push_back(p.value);
    grads.push_back(p.grad);
  }
  nn::adam_update(values, grads, state);
}

inline void check_finite(double loss, const char* what, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw DivergenceError(std::string(what) + " loss became non-finite in epoch " + std::to_string(epoch) +
                          "; lower the learning rate");
  }
}

/// Runs `epoch_fn` (returns the train loss) and `test_fn` until the test loss
/// fails to improve for `patience` epochs; parameters end at the best epoch.
template <typename T, typename EpochFn, typename TestFn>
LossCurve fit_loop(const std::vector<NamedParam<T>>& params, const TrainOptions& opt, const char* what,
                   EpochFn&& epoch_fn, TestFn&& test_fn) {
  LossCurve curve;
  auto best = snapshot(params);
  curve.best_test = test_fn();
  check_finite(curve.best_test, what, 0);
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    const double train = epoch_fn(epoch);
    check_finite(train, what, epoch);
    const double test = test_fn();
    check_finite(test, what, epoch);
    curve.train.push_back(train);
    curve.test.push_back(test);
    if (opt.on_epoch) opt.on_epoch(epoch, train, test);
    if (test < curve.best_test) {
      curve.best_test = test;
      curve.best_epoch = epoch;
      best = snapshot(params);
      since_best = 0;
    } else if (++since_best >= opt.patience) {
      break;
    }
  }
  restore(params, best);
  return curve;
}

}  // namespace detail

template <typename T>
struct Autoencoder {
  Encoder<T> encoder;
  Decoder<T> decoder;

  Autoencoder() = default;
  Autoencoder(const AutoencoderSpec& spec, std::mt19937_64& rng) : encoder(spec, rng), decoder(spec, rng) {}

  std::vector<NamedParam<T>> parameters() {
    auto p = encoder.parameters();
    auto d = decoder.parameters();
    p.insert(p.end(), d.begin(), d.end());
    return p;
  }

  Tensor<T> reconstruct(const Tensor<T>& x) const { return decoder.forward(encoder.forward(x)); }
};

/// Mean pixel BCE of decode(encode(x)) over `indices`.
template <typename T>
double reconstruction_bce(const Autoencoder<T>& ae, const std::vector<BinaryImage>& frames,
                          std::span<const std::size_t> indices, std::size_t batch = 256) {
  double sum = 0.0;
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const auto chunk = indices.subspan(start, std::min(batch, indices.size() - start));
    const Tensor<T> x = frames_to_batch<T>(frames, chunk);
    sum += nn::bce_loss(ae.reconstruct(x), x) * static_cast<double>(chunk.size());
  }
  return sum / static_cast<double>(indices.size());
}

/// Minibatch Adam on pixel BCE; early stopping on the test frames.
template <typename T>
LossCurve train_autoencoder(Autoencoder<T>& ae, const std::vector<BinaryImage>& frames, const Range& train,
                            const Range& test, const TrainOptions& opt, std::mt19937_64& rng) {
  if (train.size() == 0 || test.size() == 0) throw ConfigError("autoencoder needs non-empty train and test ranges");
  if (opt.batch_size == 0) throw ConfigError("batch_size must be positive");
  const nn::FlushDenormals ftz;
  const auto params = ae.parameters();
  nn::AdamState<T> adam{opt.adam, 0, {}, {}};
  std::vector<std::size_t> order = train.indices();
  const std::vector<std::size_t> test_idx = test.indices();
  std::normal_distribution<double> noise(0.0, opt.latent_noise);
  const std::size_t latent = ae.encoder.spec().latent;

  auto epoch_fn = [&](std::size_t epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::span<const std::size_t> chunk(order.data() + start, std::min(opt.batch_size, order.size() - start));
      const Tensor<T> x = frames_to_batch<T>(frames, chunk);
      Tensor<T> eps;
      if (opt.latent_noise > 0.0) {
        eps = Tensor<T>({chunk.size(), latent});
        for (auto& v : eps.vec()) v = static_cast<T>(noise(rng));
      }
      typename Encoder<T>::Cache ec;
      typename Decoder<T>::Cache dc;
      const Tensor<T> z = ae.encoder.forward(x, &ec, opt.latent_noise > 0.0 ? &eps : nullptr);
      const Tensor<T> y = ae.decoder.forward(z, &dc);
      const double loss = nn::bce_loss(y, x);
      detail::check_finite(loss, "autoencoder", epoch);
      sum += loss * static_cast<double>(chunk.size());
      detail::zero_grads(params);
      const Tensor<T> dz = ae.decoder.backward(dc, nn::bce_logits_grad(y, x));
      ae.encoder.backward(ec, nn::logistic_backward(z, dz));
      detail::adam_step(params, adam);
    }
    return sum / static_cast<double>(order.size());
  };
  auto test_fn = [&] { return reconstruction_bce(ae, frames, test_idx); };
  return detail::fit_loop(params, opt, "autoencoder", epoch_fn, test_fn);
}

/// Targets for windows over `range`: latent rows t in [begin + lookback, end),
/// masked, normalised and clipped to [0, 1]. `clipped` counts clipped values.
inline std::vector<double> latent_targets(std::span<const double> latents, std::size_t features, const FeatureMask& mask,
                                          const Normalizer& latent_norm, const Range& range, std::size_t lookback,
                                          std::size_t* clipped = nullptr) {
  std::vector<double> out;
  std::size_t clips = 0;
  for (std::size_t t = range.begin + lookback; t < range.end; ++t) {
    const auto reduced = mask.mask(latents.subspan(t * features, features));
    for (std::size_t j = 0; j < reduced.size(); ++j) {
      const double v = latent_norm.apply(reduced[j], j);
      const double c = std::clamp(v, 0.0, 1.0);
      clips += c != v;
      out.push_back(c);
    }
  }
  if (clipped) *clipped = clips;
  return out;
}

/// Minibatch Adam on latent BCE; early stopping on the test windows.
template <typename T>
LossCurve train_rnn(SensorRnn<T>& rnn, const Tensor<T>& train_x, const Tensor<T>& train_y, const Tensor<T>& test_x,
                    const Tensor<T>& test_y, const TrainOptions& opt, std::mt19937_64& rng) {
  const std::size_t n = train_x.dim(0);
  if (n == 0 || test_x.dim(0) == 0) throw ConfigError("rnn needs non-empty train and test windows");
  if (train_y.dim(0) != n || test_y.dim(0) != test_x.dim(0)) throw ShapeError("rnn windows and targets misaligned");
  if (opt.batch_size == 0) throw ConfigError("batch_size must be positive");
  const nn::FlushDenormals ftz;
  const auto params = rnn.parameters();
  nn::AdamState<T> adam{opt.adam, 0, {}, {}};
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps = train_x.dim(1), ch = train_x.dim(2), out = train_y.dim(1);

  auto epoch_fn = [&](std::size_t epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t start = 0; start < n; start += opt.batch_size) {
      const std::size_t m = std::min(opt.batch_size, n - start);
      Tensor<T> x({m, steps, ch}), y({m, out});
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t r = order[start + i];
        std::copy_n(train_x.data() + r * steps * ch, steps * ch, x.data() + i * steps * ch);
        std::copy_n(train_y.data() + r * out, out, y.data() + i * out);
      }
      typename SensorRnn<T>::Cache cache;
      const Tensor<T> p = rnn.forward(x, &cache);
      const double loss = nn::bce_loss(p, y);
      detail::check_finite(loss, "rnn", epoch);
      sum += loss * static_cast<double>(m);
      detail::zero_grads(params);
      rnn.backward(cache, nn::bce_logits_grad(p, y));
      detail::adam_step(params, adam);
    }
    return sum / static_cast<double>(n);
  };
  auto test_fn = [&] { return nn::bce_loss(rnn.forward(test_x), test_y); };
  return detail::fit_loop(params, opt, "rnn", epoch_fn, test_fn);
}

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

/// Intersection over union of two thresholded frames; 1 when both are empty.
inline double thresholded_iou(std::span<const float> probabilities, const BinaryImage& truth, double threshold = 0.5) {
  if (probabilities.size() != truth.pixels.size()) throw ShapeError("iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const bool a = probabilities[i] >= threshold, b = truth.pixels[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline BinaryImage threshold_image(std::span<const float> probabilities, std::size_t width, std::size_t height,
                                   double threshold = 0.5) {
  if (probabilities.size() != width * height) throw ShapeError("threshold_image: size mismatch");
  BinaryImage img(width, height);
  for (std::size_t i = 0; i < probabilities.size(); ++i) img.pixels[i] = probabilities[i] >= threshold ? 1 : 0;
  return img;
}

}  // namespace softsense

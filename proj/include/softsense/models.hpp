#pragma once

// The three networks: convolutional encoder (frame -> latent code), mirrored
// transposed-convolution decoder (latent -> frame probabilities), and the
// single-layer LSTM mapping a window of stretch readings to the active latent
// features. `imagine` chains sensors -> LSTM -> unmask -> decoder.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "softsense/nn/layers.hpp"
#include "softsense/nn/lstm.hpp"
#include "softsense/preprocess.hpp"
#include "softsense/raster.hpp"
#include "softsense/sensing.hpp"

namespace softsense {

using nn::Shape;
using nn::Tensor;

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
};

struct AutoencoderSpec {
  std::size_t image_height = kImageHeight;
  std::size_t image_width = kImageWidth;
  std::vector<std::size_t> channels{8, 16, 32, 32};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t pad = 1;
  std::size_t latent = 32;

  /// Spatial (height, width) before the first conv and after each one.
  [[nodiscard]] std::vector<std::pair<std::size_t, std::size_t>> spatial_sizes() const {
    std::vector<std::pair<std::size_t, std::size_t>> sizes{{image_height, image_width}};
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const auto [h, w] = sizes.back();
      sizes.emplace_back(nn::conv_out_size(h, kernel, stride, pad), nn::conv_out_size(w, kernel, stride, pad));
    }
    return sizes;
  }
  [[nodiscard]] std::size_t bottleneck_size() const {
    const auto [h, w] = spatial_sizes().back();
    return channels.back() * h * w;
  }
  [[nodiscard]] nn::ConvGeometry geometry() const { return {stride, pad}; }
};

struct RnnSpec {
  std::size_t inputs = 4;
  std::size_t hidden = 64;
  std::size_t lookback = 6;
  std::size_t outputs = 32;  // active latent features
};

namespace detail {

template <typename T>
void init_uniform(Tensor<T>& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
}

template <typename T>
void zero_grads(const std::vector<NamedParam<T>>& params) {
  for (const auto& p : params) p.grad->zero();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder: conv(s2) x4 with ReLU, then dense -> logistic latent.
// ---------------------------------------------------------------------------

template <typename T>
class Encoder {
 public:
  struct Cache {
    std::vector<Tensor<T>> activations;  // input, then ReLU output of each conv
    Tensor<T> latent;                    // [N, L] in (0, 1)
  };

  Encoder() = default;
  Encoder(const AutoencoderSpec& spec, std::mt19937_64& rng) : spec_(spec) {
    std::size_t cin = 1;
    for (std::size_t cout : spec.channels) {
      const std::size_t fan_in = cin * spec.kernel * spec.kernel;
      Layer layer{Tensor<T>({cout, cin, spec.kernel, spec.kernel}), Tensor<T>({cout})};
      detail::init_uniform(layer.w, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
      conv_.push_back(std::move(layer));
      cin = cout;
    }
    dense_ = {Tensor<T>({spec.latent, spec.bottleneck_size()}), Tensor<T>({spec.latent})};
    detail::init_uniform(dense_.w, std::sqrt(3.0 / static_cast<double>(spec.bottleneck_size())), rng);
    allocate_grads();
  }

  [[nodiscard]] const AutoencoderSpec& spec() const { return spec_; }

  /// x: [N, 1, H, W] with values in {0, 1}. `logit_noise`, if non-null, is
  /// added to the pre-logistic latent (training only).
  Tensor<T> forward(const Tensor<T>& x, Cache* cache = nullptr, const Tensor<T>* logit_noise = nullptr) const {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != spec_.image_height || x.dim(3) != spec_.image_width) {
      throw ShapeError("encoder expects [N, 1, " + std::to_string(spec_.image_height) + ", " +
                       std::to_string(spec_.image_width) + "] images, got " + nn::shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0);
    Tensor<T> a = x;
    if (cache) cache->activations.assign(1, x);
    for (const Layer& layer : conv_) {
      a = nn::relu(nn::conv2d(a, layer.w, layer.b, spec_.geometry()));
      if (cache) cache->activations.push_back(a);
    }
    Tensor<T> logits = nn::dense(std::move(a).reshaped({n, spec_.bottleneck_size()}), dense_.w, dense_.b);
    if (logit_noise) {
      nn::require_shape(logit_noise->shape(), logits.shape(), "encoder latent noise");
      for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += (*logit_noise)[i];
    }
    Tensor<T> latent = nn::logistic(std::move(logits));
    if (cache) cache->latent = latent;
    return latent;
  }

  /// Accumulates parameter gradients given dLoss/dlogits of the latent layer.
  void backward(const Cache& cache, const Tensor<T>& dlogits) {
    const std::size_t n = dlogits.dim(0);
    const Tensor<T> flat = cache.activations.back().reshaped({n, spec_.bottleneck_size()});
    auto g = nn::dense_backward(flat, dense_.w, dlogits);
    accumulate(dense_grad_, g);
    Tensor<T> d = std::move(g.dx).reshaped(cache.activations.back().shape());
    for (std::size_t i = conv_.size(); i-- > 0;) {
      d = nn::relu_backward(cache.activations[i + 1], std::move(d));
      auto cg = nn::conv2d_backward(cache.activations[i], conv_[i].w, d, spec_.geometry());
      accumulate(conv_grad_[i], cg);
      d = std::move(cg.dx);
    }
  }

  std::vector<NamedParam<T>> parameters() {
    std::vector<NamedParam<T>> out;
    for (std::size_t i = 0; i < conv_.size(); ++i) {
      out.push_back({"encoder.conv" + std::to_string(i) + ".weight", &conv_[i].w, &conv_grad_[i].w});
      out.push_back({"encoder.conv" + std::to_string(i) + ".bias", &conv_[i].b, &conv_grad_[i].b});
    }
    out.push_back({"encoder.dense.weight", &dense_.w, &dense_grad_.w});
    out.push_back({"encoder.dense.bias", &dense_.b, &dense_grad_.b});
    return out;
  }

 private:
  struct Layer {
    Tensor<T> w;
    Tensor<T> b;
  };

  void allocate_grads() {
    conv_grad_.clear();
    for (const Layer& l : conv_) conv_grad_.push_back({Tensor<T>(l.w.shape()), Tensor<T>(l.b.shape())});
    dense_grad_ = {Tensor<T>(dense_.w.shape()), Tensor<T>(dense_.b.shape())};
  }
  static void accumulate(Layer& acc, const nn::ParamGrads<T>& g) {
    for (std::size_t i = 0; i < acc.w.size(); ++i) acc.w[i] += g.dw[i];
    for (std::size_t i = 0; i < acc.b.size(); ++i) acc.b[i] += g.db[i];
  }

  AutoencoderSpec spec_;
  std::vector<Layer> conv_, conv_grad_;
  Layer dense_, dense_grad_;
};

// ---------------------------------------------------------------------------
// Decoder: dense -> ReLU -> transposed conv (s2) x4, ReLU between, logistic out,
// each stage cropped to the matching encoder size.
// ---------------------------------------------------------------------------

template <typename T>
class Decoder {
 public:
  struct Cache {
    Tensor<T> latent;
    std::vector<Tensor<T>> activations;  // dense output, then output of each transposed conv
  };

  Decoder() = default;
  Decoder(const AutoencoderSpec& spec, std::mt19937_64& rng) : spec_(spec) {
    dense_ = {Tensor<T>({spec.bottleneck_size(), spec.latent}), Tensor<T>({spec.bottleneck_size()})};
    detail::init_uniform(dense_.w, std::sqrt(6.0 / static_cast<double>(spec.latent)), rng);
    const std::size_t stages = spec.channels.size();
    for (std::size_t i = 0; i < stages; ++i) {
      const std::size_t cin = spec.channels[stages - 1 - i];
      const std::size_t cout = i + 1 < stages ? spec.channels[stages - 2 - i] : 1;
      const double fan_in = static_cast<double>(cin * spec.kernel * spec.kernel) /
                            static_cast<double>(spec.stride * spec.stride);
      Layer layer{Tensor<T>({cin, cout, spec.kernel, spec.kernel}), Tensor<T>({cout})};
      detail::init_uniform(layer.w, std::sqrt((i + 1 < stages ? 6.0 : 3.0) / fan_in), rng);
      tconv_.push_back(std::move(layer));
    }
    tconv_grad_.clear();
    for (const Layer& l : tconv_) tconv_grad_.push_back({Tensor<T>(l.w.shape()), Tensor<T>(l.b.shape())});
    dense_grad_ = {Tensor<T>(dense_.w.shape()), Tensor<T>(dense_.b.shape())};
  }

  [[nodiscard]] const AutoencoderSpec& spec() const { return spec_; }

  /// latent: [N, L] -> probabilities [N, 1, H, W].
  Tensor<T> forward(const Tensor<T>& latent, Cache* cache = nullptr) const {
    if (latent.rank() != 2 || latent.dim(1) != spec_.latent) {
      throw ShapeError("decoder expects [N, " + std::to_string(spec_.latent) + "] latents, got " +
                       nn::shape_str(latent.shape()));
    }
    const std::size_t n = latent.dim(0);
    const auto sizes = spec_.spatial_sizes();
    const std::size_t stages = tconv_.size();
    Tensor<T> a = nn::relu(nn::dense(latent, dense_.w, dense_.b))
                      .reshaped({n, spec_.channels.back(), sizes.back().first, sizes.back().second});
    if (cache) {
      cache->latent = latent;
      cache->activations.assign(1, a);
    }
    for (std::size_t i = 0; i < stages; ++i) {
      const auto [h, w] = sizes[stages - 1 - i];
      Tensor<T> z = nn::conv2d_transpose(a, tconv_[i].w, tconv_[i].b, spec_.geometry(), h, w);
      a = i + 1 < stages ? nn::relu(std::move(z)) : nn::logistic(std::move(z));
      if (cache) cache->activations.push_back(a);
    }
    return a;
  }

  /// Accumulates parameter gradients given dLoss/dlogits of the output layer;
  /// returns dLoss/dlatent.
  Tensor<T> backward(const Cache& cache, const Tensor<T>& dlogits) {
    const std::size_t n = dlogits.dim(0);
    const std::size_t stages = tconv_.size();
    Tensor<T> d = dlogits;
    for (std::size_t i = stages; i-- > 0;) {
      if (i + 1 < stages) d = nn::relu_backward(cache.activations[i + 1], std::move(d));
      auto g = nn::conv2d_transpose_backward(cache.activations[i], tconv_[i].w, d, spec_.geometry());
      accumulate(tconv_grad_[i], g);
      d = std::move(g.dx);
    }
    d = nn::relu_backward(cache.activations.front(), std::move(d)).reshaped({n, spec_.bottleneck_size()});
    auto g = nn::dense_backward(cache.latent, dense_.w, d);
    accumulate(dense_grad_, g);
    return std::move(g.dx);
  }

  std::vector<NamedParam<T>> parameters() {
    std::vector<NamedParam<T>> out;
    out.push_back({"decoder.dense.weight", &dense_.w, &dense_grad_.w});
    out.push_back({"decoder.dense.bias", &dense_.b, &dense_grad_.b});
    for (std::size_t i = 0; i < tconv_.size(); ++i) {
      out.push_back({"decoder.tconv" + std::to_string(i) + ".weight", &tconv_[i].w, &tconv_grad_[i].w});
      out.push_back({"decoder.tconv" + std::to_string(i) + ".bias", &tconv_[i].b, &tconv_grad_[i].b});
    }
    return out;
  }

 private:
  struct Layer {
    Tensor<T> w;
    Tensor<T> b;
  };
  static void accumulate(Layer& acc, const nn::ParamGrads<T>& g) {
    for (std::size_t i = 0; i < acc.w.size(); ++i) acc.w[i] += g.dw[i];
    for (std::size_t i = 0; i < acc.b.size(); ++i) acc.b[i] += g.db[i];
  }

  AutoencoderSpec spec_;
  Layer dense_, dense_grad_;
  std::vector<Layer> tconv_, tconv_grad_;
};

// ---------------------------------------------------------------------------
// Sensor-to-latent recurrent model
// ---------------------------------------------------------------------------

template <typename T>
class SensorRnn {
 public:
  struct Cache {
    std::vector<nn::LstmStep<T>> steps;
    Tensor<T> prediction;
  };

  SensorRnn() = default;
  SensorRnn(const RnnSpec& spec, std::mt19937_64& rng) : spec_(spec) {
    const std::size_t h = spec.hidden;
    lstm_ = {Tensor<T>({4 * h, spec.inputs + h}), Tensor<T>({4 * h})};
    detail::init_uniform(lstm_.weight, 1.0 / std::sqrt(static_cast<double>(h)), rng);
    for (std::size_t j = h; j < 2 * h; ++j) lstm_.bias[j] = T(1);  // forget gate
    readout_w_ = Tensor<T>({spec.outputs, h});
    readout_b_ = Tensor<T>({spec.outputs});
    detail::init_uniform(readout_w_, std::sqrt(3.0 / static_cast<double>(h)), rng);
    grad_lstm_ = {Tensor<T>(lstm_.weight.shape()), Tensor<T>(lstm_.bias.shape())};
    grad_readout_w_ = Tensor<T>(readout_w_.shape());
    grad_readout_b_ = Tensor<T>(readout_b_.shape());
  }

  [[nodiscard]] const RnnSpec& spec() const { return spec_; }

  /// windows: [N, lookback, inputs], consumed oldest first; returns [N, outputs] in (0, 1).
  Tensor<T> forward(const Tensor<T>& windows, Cache* cache = nullptr) const {
    if (windows.rank() != 3 || windows.dim(1) != spec_.lookback || windows.dim(2) != spec_.inputs) {
      throw ShapeError("rnn expects windows [N, " + std::to_string(spec_.lookback) + ", " +
                       std::to_string(spec_.inputs) + "], got " + nn::shape_str(windows.shape()));
    }
    auto steps = nn::lstm_forward(windows, lstm_);
    Tensor<T> pred = nn::logistic(nn::dense(steps.back().h, readout_w_, readout_b_));
    if (cache) {
      cache->steps = std::move(steps);
      cache->prediction = pred;
    }
    return pred;
  }

  void backward(const Cache& cache, const Tensor<T>& dlogits) {
    auto g = nn::dense_backward(cache.steps.back().h, readout_w_, dlogits);
    for (std::size_t i = 0; i < g.dw.size(); ++i) grad_readout_w_[i] += g.dw[i];
    for (std::size_t i = 0; i < g.db.size(); ++i) grad_readout_b_[i] += g.db[i];
    std::vector<Tensor<T>> dh(cache.steps.size());
    dh.back() = std::move(g.dx);
    auto lg = nn::lstm_backward(cache.steps, lstm_, dh);
    for (std::size_t i = 0; i < lg.weight.size(); ++i) grad_lstm_.weight[i] += lg.weight[i];
    for (std::size_t i = 0; i < lg.bias.size(); ++i) grad_lstm_.bias[i] += lg.bias[i];
  }

  std::vector<NamedParam<T>> parameters() {
    return {{"rnn.lstm.weight", &lstm_.weight, &grad_lstm_.weight},
            {"rnn.lstm.bias", &lstm_.bias, &grad_lstm_.bias},
            {"rnn.readout.weight", &readout_w_, &grad_readout_w_},
            {"rnn.readout.bias", &readout_b_, &grad_readout_b_}};
  }

 private:
  RnnSpec spec_;
  nn::LstmParams<T> lstm_, grad_lstm_;
  Tensor<T> readout_w_, readout_b_, grad_readout_w_, grad_readout_b_;
};

// ---------------------------------------------------------------------------
// Convenience wrappers
// ---------------------------------------------------------------------------

/// Frames [begin, end) as a float batch [N, 1, H, W].
template <typename T>
Tensor<T> frames_to_batch(const std::vector<BinaryImage>& frames, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("empty frame batch");
  const BinaryImage& first = frames.at(indices.front());
  Tensor<T> x({indices.size(), 1, first.height, first.width});
  const std::size_t plane = first.width * first.height;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const BinaryImage& img = frames.at(indices[i]);
    if (img.pixels.size() != plane) throw ShapeError("frame size mismatch in batch");
    for (std::size_t k = 0; k < plane; ++k) x[i * plane + k] = static_cast<T>(img.pixels[k]);
  }
  return x;
}

template <typename T>
Tensor<T> encode(const Encoder<T>& enc, const BinaryImage& image) {
  const std::size_t idx = 0;
  return enc.forward(frames_to_batch<T>({image}, std::span<const std::size_t>(&idx, 1)));
}

template <typename T>
Tensor<T> decode(const Decoder<T>& dec, std::span<const double> latent) {
  Tensor<T> z({1, latent.size()});
  for (std::size_t i = 0; i < latent.size(); ++i) z[i] = static_cast<T>(latent[i]);
  return dec.forward(z);
}

/// Latents for the given frame indices, row-major [indices.size() x L].
template <typename T>
std::vector<double> encode_frames(const Encoder<T>& enc, const std::vector<BinaryImage>& frames,
                                  std::span<const std::size_t> indices, std::size_t batch = 256) {
  std::vector<double> out;
  out.reserve(indices.size() * enc.spec().latent);
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const auto chunk = indices.subspan(start, std::min(batch, indices.size() - start));
    const Tensor<T> z = enc.forward(frames_to_batch<T>(frames, chunk));
    out.insert(out.end(), z.vec().begin(), z.vec().end());
  }
  return out;
}

/// Normalised sensor windows for targets t in [begin + lookback, end): window
/// rows t - lookback .. t - 1. Values are clipped to [0, 1]; `clipped` counts
/// how many needed it.
template <typename T>
Tensor<T> make_windows(const SensorTrace& trace, const Normalizer& norm, std::size_t begin, std::size_t end,
                       std::size_t lookback, std::size_t* clipped = nullptr) {
  if (end > trace.rows() || begin + lookback >= end) {
    throw ShapeError("sensor segment [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") too short for lookback " + std::to_string(lookback));
  }
  const std::size_t ch = trace.channels;
  const std::size_t count = end - begin - lookback;
  Tensor<T> w({count, lookback, ch});
  std::size_t clips = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t target = begin + lookback + i;
    for (std::size_t s = 0; s < lookback; ++s)
      for (std::size_t c = 0; c < ch; ++c) {
        const double v = norm.apply(trace.at(target - lookback + s, c), c);
        const double cv = std::clamp(v, 0.0, 1.0);
        clips += cv != v;
        w[(i * lookback + s) * ch + c] = static_cast<T>(cv);
      }
  }
  if (clipped) *clipped = clips;
  return w;
}

template <typename T>
Tensor<T> rnn_predict(const SensorRnn<T>& rnn, const Tensor<T>& windows) {
  return rnn.forward(windows);
}

struct Imagination {
  Tensor<float> predicted;  // [M, active] normalised latent predictions
  Tensor<float> frames;     // [M, 1, H, W] probabilities
};

/// Sensor segment -> imagined frames. For each t >= lookback in the segment the
/// window t - lookback .. t - 1 is normalised, mapped to the active latent
/// features, unmasked, de-normalised and decoded. Yields rows - lookback frames.
template <typename T>
Imagination imagine(const SensorTrace& segment, const SensorRnn<T>& rnn, const Decoder<T>& dec,
                    const FeatureMask& mask, const Normalizer& sensor_norm, const Normalizer& latent_norm) {
  const std::size_t lookback = rnn.spec().lookback;
  if (segment.rows() < lookback + 1) throw ShapeError("imagine: segment shorter than lookback + 1");
  if (mask.full_size() != dec.spec().latent || latent_norm.channels() != mask.active_count() ||
      sensor_norm.channels() != segment.channels) {
    throw DependencyError("imagine: mask or normaliser metadata does not match the models");
  }
  const Tensor<T> windows = make_windows<T>(segment, sensor_norm, 0, segment.rows(), lookback);
  const Tensor<T> pred = rnn.forward(windows);
  const std::size_t m = pred.dim(0), active = pred.dim(1), full = mask.full_size();
  Tensor<T> latents({m, full});
  std::vector<double> reduced(active);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < active; ++j) reduced[j] = latent_norm.invert(pred[i * active + j], j);
    const std::vector<double> z = mask.unmask(reduced);
    for (std::size_t j = 0; j < full; ++j) latents[i * full + j] = static_cast<T>(z[j]);
  }
  Imagination out;
  out.predicted = pred.template cast<float>();
  out.frames = dec.forward(latents).template cast<float>();
  return out;
}

}  // namespace softsense

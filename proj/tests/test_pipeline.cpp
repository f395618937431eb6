#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "softsense/pipeline.hpp"
#include "softsense/stages.hpp"

using namespace softsense;
using nn::Tensor;

namespace {

AutoencoderSpec small_spec() {
  AutoencoderSpec s;
  s.image_height = 16;
  s.image_width = 20;
  s.channels = {4, 8};
  s.latent = 6;
  return s;
}

std::vector<BinaryImage> bar_frames(std::size_t count, std::size_t w, std::size_t h) {
  std::vector<BinaryImage> frames;
  for (std::size_t i = 0; i < count; ++i) {
    BinaryImage img(w, h);
    const std::size_t col = 2 + (i * 3) % (w - 6);
    for (std::size_t r = 2; r < h - 2; ++r)
      for (std::size_t c = col; c < col + 3; ++c) img.pixels[r * w + c] = 1;
    frames.push_back(img);
  }
  return frames;
}

double binary_entropy(double p) { return -(p * std::log(p) + (1.0 - p) * std::log(1.0 - p)); }

}  // namespace

// --- splits -----------------------------------------------------------------

TEST(SplitDataset, DefaultSizesAre8500_1000_500) {
  const Splits s = split_dataset(10000, 10000, SplitSpec{});
  EXPECT_EQ(s.train.size(), 8500u);
  EXPECT_EQ(s.test.size(), 1000u);
  EXPECT_EQ(s.eval.size(), 500u);
  EXPECT_EQ(s.train.begin, 0u);
  EXPECT_EQ(s.test.begin, 8500u);
  EXPECT_EQ(s.eval.begin, 9500u);
  EXPECT_EQ(s.eval.end, 10000u);
}

TEST(SplitDataset, RangesAreDisjointAndConcatenateToTheSequence) {
  const Splits s = split_dataset(10001, 10001, SplitSpec{});
  std::vector<std::size_t> all;
  for (const Range& r : {s.train, s.test, s.eval}) {
    const auto idx = r.indices();
    all.insert(all.end(), idx.begin(), idx.end());
  }
  ASSERT_EQ(all.size(), 10000u);
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
  for (std::size_t i = 0; i < 10000; ++i) {
    EXPECT_EQ(s.train.contains(i) + s.test.contains(i) + s.eval.contains(i), 1) << i;
  }
}

TEST(SplitDataset, MisalignedOrShortInputsAreRejected) {
  EXPECT_THROW(split_dataset(10000, 9999, SplitSpec{}), ConfigError);
  EXPECT_THROW(split_dataset(9999, 9999, SplitSpec{}), ConfigError);
  EXPECT_THROW(split_dataset(10000, 10000, SplitSpec{85.0, 10.0, 5.005, 0.01}), ConfigError);
}

// --- normaliser --------------------------------------------------------------

TEST(Normalizer, UnitRangeDataIsLeftUnchanged) {
  std::vector<double> data{0.0, 1.0, 0.25, 0.5, 1.0, 0.0, 0.75, 0.125};
  const Normalizer n = Normalizer::fit(data, 2);
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(n.apply(data[i], i % 2), data[i]);
}

TEST(Normalizer, InvertUndoesApplyOnTrainingData) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d(3.0, 40.0);
  std::vector<double> data(4000);
  for (double& v : data) v = d(rng);
  const Normalizer n = Normalizer::fit(data, 4);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double y = n.apply(data[i], i % 4);
    EXPECT_GE(y, 0.0);
    EXPECT_LE(y, 1.0);
    EXPECT_NEAR(n.invert(y, i % 4), data[i], 1e-12 * std::max(1.0, std::abs(data[i])));
  }
}

TEST(Normalizer, ConstantChannelMapsToOneHalfAndEmptyInputThrows) {
  const Normalizer n = Normalizer::fit(std::vector<double>{2.0, 1.0, 2.0, 3.0}, 2);
  EXPECT_EQ(n.apply(2.0, 0), 0.5);
  EXPECT_EQ(n.apply(17.0, 0), 0.5);
  EXPECT_EQ(n.invert(0.5, 0), 2.0);
  EXPECT_THROW(Normalizer::fit(std::vector<double>{}, 2), ConfigError);
}

// --- feature mask -------------------------------------------------------------

TEST(FeatureMask, ConstantColumnIsMaskedAndMeansAreRestored) {
  std::vector<double> latents;
  for (int t = 0; t < 200; ++t) {
    latents.push_back(0.5 + 0.3 * std::sin(0.1 * t));
    latents.push_back(0.42);
    latents.push_back(0.5 + 0.2 * std::cos(0.05 * t));
  }
  const FeatureMask m = build_feature_mask(latents, 3);
  EXPECT_EQ(m.active, (std::vector<std::uint8_t>{1, 0, 1}));
  EXPECT_NEAR(m.means[1], 0.42, 1e-12);
  const auto full = m.unmask(m.mask(std::vector<double>{0.1, 0.9, 0.3}));
  EXPECT_EQ(full, (std::vector<double>{0.1, m.means[1], 0.3}));
}

TEST(FeatureMask, SinusoidalColumnsAreAllActive) {
  std::vector<double> latents;
  for (int t = 0; t < 500; ++t)
    for (int f = 0; f < 8; ++f) latents.push_back(0.5 + 0.1 * std::sin(0.02 * t * (f + 1)));
  EXPECT_EQ(build_feature_mask(latents, 8).active_count(), 8u);
}

TEST(FeatureMask, MaskedCountNeverGrowsAsTheThresholdFalls) {
  // Encoder latents of rendered frames, from an untrained encoder.
  std::mt19937_64 rng(5);
  const Encoder<double> enc(small_spec(), rng);
  const auto frames = bar_frames(40, 20, 16);
  std::vector<std::size_t> idx(40);
  std::iota(idx.begin(), idx.end(), 0);
  const auto latents = encode_frames(enc, frames, idx);
  std::size_t previous = 7;
  for (double threshold : {1.0, 0.1, 0.03, 0.01, 3e-3, 1e-3, 1e-4, 0.0}) {
    std::size_t masked = 6;
    try {
      masked = 6 - build_feature_mask(latents, 6, threshold).active_count();
    } catch (const ConfigError&) {
    }
    EXPECT_LE(masked, previous) << threshold;
    previous = masked;
  }
  EXPECT_EQ(previous, 0u);
}

TEST(FeatureMask, AllMaskedIsAConfigError) {
  EXPECT_THROW(build_feature_mask(std::vector<double>(30, 0.5), 3), ConfigError);
}

// --- autoencoder training ---------------------------------------------------

TEST(TrainAutoencoder, SingleRepeatedFrameReachesLowTestLossWithin50Epochs) {
  const auto one = bar_frames(1, 84, 52).front();
  const std::vector<BinaryImage> frames(320, one);
  std::mt19937_64 rng(7);
  Autoencoder<float> ae(AutoencoderSpec{}, rng);
  TrainOptions opt;
  opt.max_epochs = 50;
  opt.patience = 50;
  const LossCurve curve = train_autoencoder(ae, frames, {0, 256}, {256, 320}, opt, rng);
  EXPECT_LT(curve.best_test, 0.01);
  for (double v : curve.train) EXPECT_TRUE(std::isfinite(v));
  for (double v : curve.test) EXPECT_TRUE(std::isfinite(v));
}

TEST(TrainAutoencoder, EarlyStoppingRestoresTheBestEpoch) {
  const auto frames = bar_frames(60, 20, 16);
  std::mt19937_64 rng(8);
  Autoencoder<float> ae(small_spec(), rng);
  TrainOptions opt;
  opt.max_epochs = 40;
  opt.patience = 3;
  opt.batch_size = 16;
  opt.adam.lr = 3e-2;  // noisy enough to plateau quickly
  const LossCurve curve = train_autoencoder(ae, frames, {0, 40}, {40, 60}, opt, rng);
  ASSERT_FALSE(curve.test.empty());
  ASSERT_GT(curve.best_epoch, 0u);
  const double best = *std::min_element(curve.test.begin(), curve.test.end());
  EXPECT_EQ(curve.best_test, best);
  EXPECT_EQ(curve.test[curve.best_epoch - 1], best);
  if (curve.test.size() < opt.max_epochs) {
    EXPECT_EQ(curve.test.size(), curve.best_epoch + opt.patience);
  }
  const std::vector<std::size_t> test_idx = Range{40, 60}.indices();
  EXPECT_DOUBLE_EQ(reconstruction_bce(ae, frames, test_idx), best);
}

TEST(TrainAutoencoder, SameSeedGivesIdenticalParameters) {
  const auto frames = bar_frames(48, 20, 16);
  auto train_once = [&] {
    std::mt19937_64 rng(9);
    Autoencoder<float> ae(small_spec(), rng);
    TrainOptions opt;
    opt.max_epochs = 3;
    opt.batch_size = 8;
    opt.latent_noise = 1.0;
    const LossCurve c = train_autoencoder(ae, frames, {0, 32}, {32, 48}, opt, rng);
    std::vector<float> flat;
    for (const auto& p : ae.parameters()) flat.insert(flat.end(), p.value->vec().begin(), p.value->vec().end());
    return std::make_pair(c.test, flat);
  };
  EXPECT_EQ(train_once(), train_once());
}

// --- sequence model training ------------------------------------------------

TEST(TrainRnn, ConstantTargetApproachesItsEntropyFloor) {
  std::mt19937_64 rng(10);
  const double c = 0.3;
  const Tensor<float> x = nn::uniform_tensor<float>({256, 6, 4}, 0.0f, 1.0f, rng);
  const Tensor<float> y({256, 2}, static_cast<float>(c));
  const Tensor<float> tx = nn::uniform_tensor<float>({64, 6, 4}, 0.0f, 1.0f, rng);
  const Tensor<float> ty({64, 2}, static_cast<float>(c));
  SensorRnn<float> rnn(RnnSpec{4, 16, 6, 2}, rng);
  TrainOptions opt;
  opt.max_epochs = 150;
  opt.batch_size = 32;
  opt.adam.lr = 1e-2;
  const LossCurve curve = train_rnn(rnn, x, y, tx, ty, opt, rng);
  const double floor = binary_entropy(static_cast<float>(c));
  EXPECT_GE(curve.best_test, floor - 1e-6);
  EXPECT_LT(curve.best_test - floor, 1e-4);
}

TEST(TrainRnn, NonFiniteInputIsReportedAsDivergence) {
  std::mt19937_64 rng(11);
  Tensor<float> x = nn::uniform_tensor<float>({8, 6, 4}, 0.0f, 1.0f, rng);
  x[5] = std::numeric_limits<float>::quiet_NaN();
  const Tensor<float> y({8, 1}, 0.5f);
  SensorRnn<float> rnn(RnnSpec{4, 4, 6, 1}, rng);
  TrainOptions opt;
  opt.max_epochs = 2;
  EXPECT_THROW(train_rnn(rnn, x, y, x, y, opt, rng), DivergenceError);
}

TEST(TrainRnn, LearnsADelayedCopyOfOneSensor) {
  // Target at t is the normalised reading of channel 0 at t - 1: recoverable
  // only if windows end exactly one step before their target.
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SensorTrace trace;
  trace.channels = 4;
  for (std::size_t i = 0; i < 1200 * 4; ++i) trace.readings.push_back(u(rng) < 0.5 ? 0.05 : 0.95);
  const Normalizer norm{{0, 0, 0, 0}, {1, 1, 1, 1}};
  std::vector<double> latents(1200);
  for (std::size_t t = 1; t < 1200; ++t) latents[t] = trace.at(t - 1, 0);
  const FeatureMask mask{{1}, {0.5}};
  const Normalizer latent_norm{{0.0}, {1.0}};
  auto data = [&](const Range& r) {
    const auto y = latent_targets(latents, 1, mask, latent_norm, r, 6);
    return std::make_pair(make_windows<float>(trace, norm, r.begin, r.end, 6),
                          Tensor<float>({y.size(), 1}, std::vector<float>(y.begin(), y.end())));
  };
  const auto [x, y] = data({0, 1000});
  const auto [tx, ty] = data({1000, 1200});
  SensorRnn<float> rnn(RnnSpec{4, 8, 6, 1}, rng);
  TrainOptions opt;
  opt.max_epochs = 60;
  opt.adam.lr = 1e-2;
  const LossCurve curve = train_rnn(rnn, x, y, tx, ty, opt, rng);
  // Entropy floor of {0.05, 0.95} targets.
  EXPECT_LT(curve.best_test, binary_entropy(0.05) + 0.02);
}

TEST(Alignment, EveryTargetFollowsItsWindowEndByOneStep) {
  SensorTrace trace;
  trace.channels = 1;
  for (std::size_t t = 0; t < 50; ++t) trace.readings.push_back(static_cast<double>(t));
  std::vector<double> latents(50);
  for (std::size_t t = 0; t < 50; ++t) latents[t] = static_cast<double>(t);
  // Both sides are clipped to [0, 1], so scale the timestamps into that range.
  const Normalizer scale{{0.0}, {50.0}};
  const FeatureMask mask{{1}, {0.0}};
  for (const Range r : {Range{0, 20}, Range{20, 35}, Range{35, 50}}) {
    const Tensor<double> w = make_windows<double>(trace, scale, r.begin, r.end, 6);
    const auto y = latent_targets(latents, 1, mask, scale, r, 6);
    ASSERT_EQ(w.dim(0), y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double window_end = std::round(w[i * 6 + 5] * 50.0);
      const double target = std::round(y[i] * 50.0);
      EXPECT_EQ(target, window_end + 1.0) << "row " << i;
      EXPECT_EQ(std::round(w[i * 6] * 50.0), target - 6.0);
    }
  }
}

// --- metrics ------------------------------------------------------------------

TEST(Metrics, ThresholdedIou) {
  BinaryImage truth(4, 1);
  truth.pixels = {1, 1, 0, 0};
  EXPECT_EQ(thresholded_iou(std::vector<float>{0.9f, 0.6f, 0.1f, 0.4f}, truth), 1.0);
  EXPECT_EQ(thresholded_iou(std::vector<float>{0.9f, 0.1f, 0.7f, 0.0f}, truth), 1.0 / 3.0);
  EXPECT_EQ(thresholded_iou(std::vector<float>{0.0f, 0.0f, 0.9f, 0.9f}, truth), 0.0);
  BinaryImage empty(4, 1);
  EXPECT_EQ(thresholded_iou(std::vector<float>(4, 0.2f), empty), 1.0);
}

TEST(Metrics, MetricsFileRoundTrips) {
  const fs::path dir = fs::temp_directory_path() / "softsense_metrics_test";
  fs::create_directories(dir);
  const Metrics m{{"a.b", 0.123456789}, {"count.x", 494.0}};
  write_metrics(dir / "m.txt", m);
  EXPECT_EQ(read_metrics(dir / "m.txt"), m);
  fs::remove_all(dir);
}

TEST(Metrics, Median) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
}

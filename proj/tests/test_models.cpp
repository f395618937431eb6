#include <gtest/gtest.h>

#include <random>

#include "softsense/pipeline.hpp"
#include "support/layer_checks.hpp"

using namespace softsense;
using nn::Tensor;

namespace {

AutoencoderSpec tiny_spec() {
  AutoencoderSpec s;
  s.image_height = 12;
  s.image_width = 10;
  s.channels = {2, 3};
  s.latent = 3;
  return s;
}

BinaryImage random_image(std::size_t w, std::size_t h, std::mt19937_64& rng) {
  BinaryImage img(w, h);
  std::bernoulli_distribution coin(0.3);
  for (auto& p : img.pixels) p = coin(rng) ? 1 : 0;
  return img;
}

SensorTrace ramp_trace(std::size_t rows, std::size_t channels) {
  SensorTrace t;
  t.channels = channels;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < channels; ++c) t.readings.push_back(static_cast<double>(r) + 0.1 * c);
  return t;
}

// Gradients of the summed (not mean) loss, so finite differences stay well above round-off.
Tensor<double> grad_copy(const std::vector<NamedParam<double>>& params, std::size_t i, double scale) {
  Tensor<double> g = *params[i].grad;
  for (auto& v : g.vec()) v *= scale;
  return g;
}

}  // namespace

TEST(Encoder, DefaultBottleneckIs768) {
  const AutoencoderSpec spec;
  const auto sizes = spec.spatial_sizes();
  EXPECT_EQ(sizes.back(), (std::pair<std::size_t, std::size_t>{4, 6}));
  EXPECT_EQ(spec.bottleneck_size(), 768u);
}

TEST(Encoder, LatentsHaveLengthLAndLieInOpenUnitInterval) {
  std::mt19937_64 rng(3);
  const Encoder<float> enc(AutoencoderSpec{}, rng);
  std::vector<BinaryImage> frames{random_image(84, 52, rng), random_image(84, 52, rng), BinaryImage{}};
  const std::vector<std::size_t> idx{0, 1, 2};
  const Tensor<float> z = enc.forward(frames_to_batch<float>(frames, idx));
  ASSERT_EQ(z.shape(), (Shape{3, 32}));
  for (float v : z.vec()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Encoder, IdenticalImagesGiveIdenticalLatents) {
  std::mt19937_64 rng(4);
  const Encoder<float> enc(AutoencoderSpec{}, rng);
  const BinaryImage img = random_image(84, 52, rng);
  EXPECT_EQ(encode(enc, img), encode(enc, BinaryImage(img)));
}

TEST(Encoder, BatchingDoesNotChangeResults) {
  std::mt19937_64 rng(5);
  const Encoder<double> enc(AutoencoderSpec{}, rng);
  std::vector<BinaryImage> frames;
  for (int i = 0; i < 5; ++i) frames.push_back(random_image(84, 52, rng));
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4};
  const auto all = encode_frames(enc, frames, idx, 5);
  const auto chunked = encode_frames(enc, frames, idx, 2);
  ASSERT_EQ(all.size(), chunked.size());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_NEAR(all[i], chunked[i], 1e-12);
}

TEST(Encoder, WrongImageSizeThrows) {
  std::mt19937_64 rng(6);
  const Encoder<float> enc(AutoencoderSpec{}, rng);
  EXPECT_THROW(encode(enc, BinaryImage(80, 52)), ShapeError);
  EXPECT_THROW(enc.forward(Tensor<float>({1, 2, 52, 84})), ShapeError);
}

TEST(Decoder, OutputIs4368ProbabilitiesAndDeterministic) {
  std::mt19937_64 rng(7);
  const Decoder<float> dec(AutoencoderSpec{}, rng);
  const std::vector<double> z(32, 0.4);
  const Tensor<float> y = decode(dec, z);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 52, 84}));
  EXPECT_EQ(y.size(), 4368u);
  for (float v : y.vec()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  EXPECT_EQ(y, decode(dec, z));
  const BinaryImage img = threshold_image(y.span(), 84, 52);
  EXPECT_EQ(img.pixels.size(), 4368u);
  for (auto p : img.pixels) EXPECT_TRUE(p == 0 || p == 1);
}

TEST(Decoder, WrongLatentLengthThrows) {
  std::mt19937_64 rng(8);
  const Decoder<float> dec(AutoencoderSpec{}, rng);
  EXPECT_THROW(decode(dec, std::vector<double>(31, 0.5)), ShapeError);
}

TEST(Autoencoder, RoundTripPreservesShapeForOtherSizes) {
  for (const auto& [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{{52, 84}, {17, 23}, {8, 8}}) {
    AutoencoderSpec spec;
    spec.image_height = h;
    spec.image_width = w;
    spec.channels = {4, 4};
    std::mt19937_64 rng(h * w);
    const Autoencoder<float> ae(spec, rng);
    const Tensor<float> x({2, 1, h, w}, 1.0f);
    EXPECT_EQ(ae.reconstruct(x).shape(), x.shape()) << h << "x" << w;
  }
}

TEST(Autoencoder, EndToEndGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    std::mt19937_64 rng(seed);
    Autoencoder<double> ae(tiny_spec(), rng);
    std::vector<BinaryImage> frames{random_image(10, 12, rng), random_image(10, 12, rng)};
    const std::vector<std::size_t> idx{0, 1};
    const Tensor<double> x = frames_to_batch<double>(frames, idx);
    Tensor<double> noise({2, 3});
    for (auto& v : noise.vec()) v = std::normal_distribution<double>(0.0, 0.5)(rng);

    const auto params = ae.parameters();
    // Zero biases put empty patches exactly on the ReLU kink.
    for (const auto& p : params)
      if (p.name.ends_with(".bias")) *p.value = softsense::testing::random_tensor(p.value->shape(), rng, -0.3, 0.3);
    typename Encoder<double>::Cache ec;
    typename Decoder<double>::Cache dc;
    for (const auto& p : params) p.grad->zero();
    const Tensor<double> z = ae.encoder.forward(x, &ec, &noise);
    const Tensor<double> y = ae.decoder.forward(z, &dc);
    const Tensor<double> dz = ae.decoder.backward(dc, nn::bce_logits_grad(y, x));
    ae.encoder.backward(ec, nn::logistic_backward(z, dz));

    std::vector<Tensor<double>> analytic;
    const double scale = static_cast<double>(x.size());
    for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(grad_copy(params, i, scale));
    std::vector<nn::GradCheckTarget> targets;
    for (std::size_t i = 0; i < params.size(); ++i) {
      targets.push_back({params[i].name, params[i].value->span(), analytic[i].span()});
    }
    auto loss = [&] { return nn::bce_loss(ae.decoder.forward(ae.encoder.forward(x, nullptr, &noise)), x) * scale; };
    const auto report = nn::grad_check(loss, targets, 1e-4);
    for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-5) << e.name << " seed " << seed;
  }
}

TEST(SensorRnn, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  SensorRnn<double> rnn(RnnSpec{4, 5, 6, 3}, rng);
  const Tensor<double> x = softsense::testing::random_tensor({3, 6, 4}, rng, 0.0, 1.0);
  const Tensor<double> t = softsense::testing::random_tensor({3, 3}, rng, 0.0, 1.0);
  const auto params = rnn.parameters();
  for (const auto& p : params) p.grad->zero();
  typename SensorRnn<double>::Cache cache;
  const Tensor<double> p = rnn.forward(x, &cache);
  rnn.backward(cache, nn::bce_logits_grad(p, t));
  std::vector<Tensor<double>> analytic;
  const double scale = static_cast<double>(t.size());
  for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(grad_copy(params, i, scale));
  std::vector<nn::GradCheckTarget> targets;
  for (std::size_t i = 0; i < params.size(); ++i) {
    targets.push_back({params[i].name, params[i].value->span(), analytic[i].span()});
  }
  const auto report = nn::grad_check([&] { return nn::bce_loss(rnn.forward(x), t) * scale; }, targets, 1e-4);
  for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-5) << e.name;
}

TEST(SensorRnn, PredictionLengthIsActiveFeatureCount) {
  std::mt19937_64 rng(12);
  const SensorRnn<float> rnn(RnnSpec{4, 64, 6, 27}, rng);
  const Tensor<float> w({2, 6, 4}, 0.5f);
  const Tensor<float> p = rnn_predict(rnn, w);
  ASSERT_EQ(p.shape(), (Shape{2, 27}));
  for (std::size_t j = 0; j < 27; ++j) EXPECT_EQ(p[j], p[27 + j]);
}

TEST(SensorRnn, MalformedWindowThrows) {
  std::mt19937_64 rng(13);
  const SensorRnn<float> rnn(RnnSpec{}, rng);
  EXPECT_THROW(rnn.forward(Tensor<float>({1, 5, 4})), ShapeError);
  EXPECT_THROW(rnn.forward(Tensor<float>({1, 6, 3})), ShapeError);
}

TEST(SensorRnn, ForgetGateBiasStartsAtOne) {
  std::mt19937_64 rng(14);
  SensorRnn<float> rnn(RnnSpec{4, 8, 6, 2}, rng);
  const Tensor<float>& bias = *rnn.parameters()[1].value;
  for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(bias[j], (j >= 8 && j < 16) ? 1.0f : 0.0f);
}

TEST(Windows, TargetTPairsWithRowsTMinus6ToTMinus1) {
  const SensorTrace trace = ramp_trace(20, 2);
  const Normalizer norm{{0.0, 0.0}, {100.0, 100.0}};
  const Tensor<double> w = make_windows<double>(trace, norm, 3, 20, 6);
  ASSERT_EQ(w.shape(), (Shape{11, 6, 2}));
  for (std::size_t i = 0; i < 11; ++i) {
    const std::size_t target = 3 + 6 + i;
    for (std::size_t s = 0; s < 6; ++s) {
      EXPECT_DOUBLE_EQ(w[(i * 6 + s) * 2], static_cast<double>(target - 6 + s) / 100.0);
    }
  }
}

TEST(Windows, OutOfRangeValuesAreClippedAndCounted) {
  const SensorTrace trace = ramp_trace(10, 1);
  const Normalizer norm{{2.0}, {5.0}};
  std::size_t clipped = 0;
  const Tensor<double> w = make_windows<double>(trace, norm, 0, 10, 2, &clipped);
  for (double v : w.vec()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  // rows 0..8 appear in windows; rows 0, 1 (twice / once) and 6, 7, 8 fall outside [2, 5].
  std::size_t expect = 0;
  for (std::size_t t = 2; t < 10; ++t)
    for (std::size_t r = t - 2; r < t; ++r) expect += (r < 2 || r > 5);
  EXPECT_EQ(clipped, expect);
}

TEST(Windows, SegmentTooShortThrows) {
  const SensorTrace trace = ramp_trace(6, 4);
  EXPECT_THROW(make_windows<float>(trace, Normalizer{{0, 0, 0, 0}, {1, 1, 1, 1}}, 0, 6, 6), ShapeError);
}

namespace {

struct ImagineFixture {
  std::mt19937_64 rng{21};
  SensorRnn<float> rnn{RnnSpec{4, 16, 6, 3}, rng};
  Decoder<float> dec{AutoencoderSpec{}, rng};
  FeatureMask mask;
  Normalizer sensor_norm{{0, 0, 0, 0}, {1, 1, 1, 1}};
  Normalizer latent_norm{{0.2, 0.1, 0.3}, {0.8, 0.9, 0.7}};

  ImagineFixture() {
    mask.active.assign(32, 0);
    mask.means.assign(32, 0.25);
    mask.active[0] = mask.active[5] = mask.active[9] = 1;
  }
};

}  // namespace

TEST(Imagine, FiveHundredStepSegmentGives494Frames) {
  ImagineFixture f;
  SensorTrace seg;
  seg.channels = 4;
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 500 * 4; ++i) seg.readings.push_back(u(rng));
  const Imagination out = imagine(seg, f.rnn, f.dec, f.mask, f.sensor_norm, f.latent_norm);
  EXPECT_EQ(out.predicted.shape(), (Shape{494, 3}));
  EXPECT_EQ(out.frames.shape(), (Shape{494, 1, 52, 84}));
}

TEST(Imagine, ConstantSensorsGiveConstantFrames) {
  ImagineFixture f;
  SensorTrace seg;
  seg.channels = 4;
  seg.readings.assign(20 * 4, 0.3);
  const Imagination out = imagine(seg, f.rnn, f.dec, f.mask, f.sensor_norm, f.latent_norm);
  ASSERT_EQ(out.frames.dim(0), 14u);
  const std::size_t plane = 4368;
  for (std::size_t i = 1; i < 14; ++i)
    for (std::size_t k = 0; k < plane; ++k) ASSERT_NEAR(out.frames[i * plane + k], out.frames[k], 1e-6);
}

TEST(Imagine, MatchesManualUnmaskAndDecode) {
  ImagineFixture f;
  SensorTrace seg;
  seg.channels = 4;
  for (int i = 0; i < 7 * 4; ++i) seg.readings.push_back(0.1 * (i % 5));
  const Imagination out = imagine(seg, f.rnn, f.dec, f.mask, f.sensor_norm, f.latent_norm);
  ASSERT_EQ(out.frames.dim(0), 1u);
  const Tensor<float> p = f.rnn.forward(make_windows<float>(seg, f.sensor_norm, 0, 7, 6));
  std::vector<double> reduced(3);
  for (std::size_t j = 0; j < 3; ++j) reduced[j] = f.latent_norm.invert(p[j], j);
  const auto full = f.mask.unmask(reduced);
  EXPECT_EQ(full[1], 0.25);
  EXPECT_EQ(decode(f.dec, full), out.frames);
}

TEST(Imagine, MismatchedMetadataIsADependencyError) {
  ImagineFixture f;
  SensorTrace seg;
  seg.channels = 4;
  seg.readings.assign(10 * 4, 0.5);
  FeatureMask empty;
  EXPECT_THROW(imagine(seg, f.rnn, f.dec, empty, f.sensor_norm, f.latent_norm), DependencyError);
  EXPECT_THROW(imagine(seg, f.rnn, f.dec, f.mask, Normalizer{}, f.latent_norm), DependencyError);
  EXPECT_THROW(imagine(seg, f.rnn, f.dec, f.mask, f.sensor_norm, Normalizer{{0}, {1}}), DependencyError);
}

TEST(Imagine, SegmentShorterThanLookbackPlusOneThrows) {
  ImagineFixture f;
  SensorTrace seg;
  seg.channels = 4;
  seg.readings.assign(6 * 4, 0.5);
  EXPECT_THROW(imagine(seg, f.rnn, f.dec, f.mask, f.sensor_norm, f.latent_norm), ShapeError);
}

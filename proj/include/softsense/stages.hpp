#pragma once

// The six file-backed stages (simulate, render, train-ae, train-rnn, imagine,
// eval) sharing one run directory and a manifest.json that records the config
// hash, seed, artifact digests and wall times. A stage refuses to run when the
// directory belongs to another config or an upstream artifact is missing or
// no longer matches its recorded digest.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <vector>

#include "softsense/checkpoint.hpp"
#include "softsense/config.hpp"
#include "softsense/hash.hpp"
#include "softsense/pipeline.hpp"
#include "softsense/trajectory_io.hpp"

namespace softsense {

namespace fs = std::filesystem;

namespace artifact {
inline constexpr const char* kTrajectory = "trajectory.sstj";
inline constexpr const char* kSensors = "sensors.csv";
inline constexpr const char* kFrames = "frames.ssim";
inline constexpr const char* kAutoencoder = "ae.ssck";
inline constexpr const char* kAeLoss = "ae_loss.csv";
inline constexpr const char* kRnn = "rnn.ssck";
inline constexpr const char* kRnnLoss = "rnn_loss.csv";
inline constexpr const char* kImagined = "imagined.ssck";
inline constexpr const char* kImaginedDir = "imagined";
inline constexpr const char* kTruthDir = "truth";
inline constexpr const char* kMetrics = "metrics.txt";
inline constexpr const char* kLatentTraces = "latent_traces.csv";
inline constexpr const char* kFrameBce = "frame_bce.csv";
inline constexpr const char* kConfig = "config.txt";
inline constexpr const char* kManifest = "manifest.json";
}  // namespace artifact

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"simulate", "render", "train-ae", "train-rnn", "imagine", "eval"};
  return names;
}

using Logger = std::function<void(const std::string&)>;

inline fs::path default_run_dir(const RunConfig& cfg) {
  return fs::path("runs") / (cfg.hash() + "-s" + std::to_string(cfg.seed));
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

class Manifest {
 public:
  Manifest(fs::path dir, const RunConfig& cfg) : dir_(std::move(dir)), hash_(cfg.hash()), seed_(cfg.seed) {
    const fs::path path = dir_ / artifact::kManifest;
    if (fs::exists(path)) {
      std::ifstream in(path);
      try {
        doc_ = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw DependencyError("unreadable manifest " + path.string() + ": " + e.what());
      }
      const std::string theirs = doc_.value("config_hash", "");
      const std::uint64_t their_seed = doc_.value("seed", std::uint64_t{0});
      if (theirs != hash_ || their_seed != seed_) {
        throw DependencyError("run directory " + dir_.string() + " belongs to config " + theirs + " seed " +
                              std::to_string(their_seed) + ", not config " + hash_ + " seed " +
                              std::to_string(seed_) + "; pass the same config or choose another --out");
      }
    } else {
      doc_ = {{"config_hash", hash_}, {"seed", seed_}, {"stages", nlohmann::json::object()}};
    }
  }

  [[nodiscard]] const fs::path& dir() const { return dir_; }
  [[nodiscard]] fs::path path(const std::string& name) const { return dir_ / name; }
  [[nodiscard]] const nlohmann::json& json() const { return doc_; }

  [[nodiscard]] bool has_stage(const std::string& stage) const { return doc_["stages"].contains(stage); }

  /// Path of an artifact produced by `stage`, after checking it still matches
  /// the digest recorded when that stage ran.
  [[nodiscard]] fs::path require(const std::string& consumer, const std::string& stage,
                                 const std::string& name) const {
    if (!has_stage(stage)) {
      throw DependencyError(consumer + " needs " + name + " from stage " + stage + ", which has not run in " +
                            dir_.string());
    }
    const auto& outputs = doc_["stages"][stage]["outputs"];
    if (!outputs.contains(name)) throw DependencyError("stage " + stage + " did not record " + name);
    const fs::path p = path(name);
    if (!fs::exists(p)) {
      throw DependencyError(consumer + " needs " + name + " but it is missing; rerun " + stage);
    }
    if (file_digest(p) != outputs[name].get<std::string>()) {
      throw DependencyError(name + " changed after stage " + stage + " wrote it; rerun " + stage);
    }
    return p;
  }

  void record(const std::string& stage, const std::map<std::string, std::string>& inputs,
              const std::vector<std::string>& outputs, double seconds) {
    nlohmann::json entry;
    entry["wall_seconds"] = seconds;
    entry["inputs"] = inputs;
    nlohmann::json out = nlohmann::json::object();
    for (const auto& name : outputs) out[name] = file_digest(path(name));
    entry["outputs"] = out;
    doc_["stages"][stage] = entry;
    save();
  }

  void save() const {
    const fs::path tmp = path(std::string(artifact::kManifest) + ".tmp");
    {
      std::ofstream o(tmp);
      if (!o) throw std::runtime_error("cannot write " + tmp.string());
      o << doc_.dump(2) << "\n";
    }
    fs::rename(tmp, path(artifact::kManifest));
  }

 private:
  fs::path dir_;
  std::string hash_;
  std::uint64_t seed_;
  nlohmann::json doc_;
};

// ---------------------------------------------------------------------------
// Shared loading helpers
// ---------------------------------------------------------------------------

struct StageContext {
  RunConfig config;
  fs::path dir;
  Logger log = [](const std::string&) {};
};

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline SplitSpec split_spec(const RunConfig& cfg) {
  return {cfg.train_seconds, cfg.test_seconds, cfg.eval_seconds, cfg.record_dt};
}

inline std::mt19937_64 stage_rng(const RunConfig& cfg, std::uint64_t stage) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(stage)};
  return std::mt19937_64(seq);
}

inline TrainOptions train_options(const RunConfig& cfg, std::size_t epochs, double lr, const Logger& log,
                                  const std::string& tag) {
  TrainOptions opt;
  opt.batch_size = cfg.batch_size;
  opt.max_epochs = epochs;
  opt.patience = cfg.patience;
  opt.adam = cfg.adam(lr);
  opt.on_epoch = [log, tag](std::size_t e, double train, double test) {
    log(tag + " epoch " + std::to_string(e) + " train " + fmt(train) + " test " + fmt(test));
  };
  return opt;
}

inline void write_loss_csv(const fs::path& path, const LossCurve& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_bce,test_bce\n";
  for (std::size_t i = 0; i < curve.train.size(); ++i) {
    out << (i + 1) << "," << fmt(curve.train[i]) << "," << fmt(curve.test[i]) << "\n";
  }
}

inline void check_checkpoint_config(const Checkpoint& ck, const RunConfig& cfg, const std::string& name) {
  if (ck.string("config_hash") != cfg.hash()) {
    throw DependencyError(name + " was trained under config " + ck.string("config_hash") + ", not " + cfg.hash());
  }
}

/// Trajectory, model and sensor trace for the configured body, verifying the
/// stored body hash.
struct SimData {
  BodyModel model;
  TrajectoryFile file;
  SensorTrace sensors;
};

inline SimData load_sim(const Manifest& m, const RunConfig& cfg, const std::string& consumer) {
  SimData d;
  d.model = build_body(cfg.body);
  d.file = load_trajectory(m.require(consumer, "simulate", artifact::kTrajectory));
  if (d.file.body_hash != cfg.body.hash()) throw DependencyError("trajectory was simulated for a different body");
  std::vector<StretchSensor> sensors;
  for (const auto& [a, b] : cfg.sensor_pair_list()) sensors.push_back(make_sensor(d.model, a, b));
  d.sensors = sample_sensors(d.file.trajectory, sensors);
  return d;
}

struct AeBundle {
  Autoencoder<float> ae;
  Checkpoint checkpoint;
};

inline AeBundle load_autoencoder(const Manifest& m, const RunConfig& cfg, const std::string& consumer) {
  AeBundle b;
  b.checkpoint = load_checkpoint(m.require(consumer, "train-ae", artifact::kAutoencoder));
  check_checkpoint_config(b.checkpoint, cfg, artifact::kAutoencoder);
  std::mt19937_64 rng(0);
  b.ae = Autoencoder<float>(cfg.autoencoder_spec(), rng);
  b.checkpoint.restore(b.ae.parameters());
  return b;
}

struct RnnBundle {
  SensorRnn<float> rnn;
  FeatureMask mask;
  Normalizer sensor_norm;
  Normalizer latent_norm;
  Checkpoint checkpoint;
};

inline RnnBundle load_rnn(const Manifest& m, const RunConfig& cfg, const std::string& consumer) {
  RnnBundle b;
  b.checkpoint = load_checkpoint(m.require(consumer, "train-rnn", artifact::kRnn));
  check_checkpoint_config(b.checkpoint, cfg, artifact::kRnn);
  b.mask = load_mask(b.checkpoint);
  b.sensor_norm = load_normalizer(b.checkpoint, "sensor");
  b.latent_norm = load_normalizer(b.checkpoint, "latent");
  std::mt19937_64 rng(0);
  b.rnn = SensorRnn<float>(cfg.rnn_spec(b.sensor_norm.channels(), b.mask.active_count()), rng);
  b.checkpoint.restore(b.rnn.parameters());
  return b;
}

inline void stamp(Checkpoint& ck, const RunConfig& cfg) {
  ck.strings["config_hash"] = cfg.hash();
  ck.strings["seed"] = std::to_string(cfg.seed);
}

inline Splits splits_for(const RunConfig& cfg, std::size_t frames, std::size_t sensor_rows) {
  const SplitSpec spec = split_spec(cfg);
  // The final recorded state (t = duration) lies past the last split.
  return split_dataset(std::min(frames, spec.total()), std::min(sensor_rows, spec.total()), spec);
}

template <typename F>
double timed(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline void stage_simulate(const StageContext& ctx) {
  const RunConfig& cfg = ctx.config;
  fs::create_directories(ctx.dir);
  Manifest m(ctx.dir, cfg);
  {
    std::ofstream c(m.path(artifact::kConfig));
    c << cfg.serialize();
  }
  const double secs = detail::timed([&] {
    const BodyModel model = build_body(cfg.body);
    std::vector<StretchSensor> sensors;
    for (const auto& [a, b] : cfg.sensor_pair_list()) sensors.push_back(make_sensor(model, a, b));
    ctx.log("simulate: " + detail::fmt(cfg.duration) + " s at " + detail::fmt(cfg.record_dt) + " s, " +
            std::to_string(cfg.substeps) + " substeps");
    const Trajectory traj = simulate(model, cfg.sim_params(), cfg.duration, cfg.record_dt, cfg.substeps);
    save_trajectory(m.path(artifact::kTrajectory), traj, cfg.excitation, cfg.body.hash());
    save_sensor_csv(m.path(artifact::kSensors), sample_sensors(traj, sensors));
    ctx.log("simulate: " + std::to_string(traj.size()) + " states recorded");
  });
  m.record("simulate", {}, {artifact::kTrajectory, artifact::kSensors, artifact::kConfig}, secs);
}

inline void stage_render(const StageContext& ctx) {
  const RunConfig& cfg = ctx.config;
  Manifest m(ctx.dir, cfg);
  std::map<std::string, std::string> inputs;
  const double secs = detail::timed([&] {
    const auto sim = detail::load_sim(m, cfg, "render");
    inputs[artifact::kTrajectory] = file_digest(m.path(artifact::kTrajectory));
    const Viewport vp = compute_viewport(sim.file.trajectory, cfg.viewport_margin, cfg.image_width, cfg.image_height);
    ctx.log("render: viewport x " + detail::fmt(vp.min_x) + " + " + detail::fmt(vp.width) + ", y " +
            detail::fmt(vp.min_y) + " + " + detail::fmt(vp.height));
    save_frames(m.path(artifact::kFrames), render_sequence(sim.file.trajectory, sim.model, vp));
  });
  m.record("render", inputs, {artifact::kFrames}, secs);
}

inline void stage_train_ae(const StageContext& ctx) {
  const RunConfig& cfg = ctx.config;
  Manifest m(ctx.dir, cfg);
  std::map<std::string, std::string> inputs;
  const double secs = detail::timed([&] {
    const FrameSequence seq = load_frames(m.require("train-ae", "render", artifact::kFrames));
    inputs[artifact::kFrames] = file_digest(m.path(artifact::kFrames));
    const Splits sp = detail::splits_for(cfg, seq.frames.size(), seq.frames.size());
    auto rng = detail::stage_rng(cfg, 1);
    Autoencoder<float> ae(cfg.autoencoder_spec(), rng);
    TrainOptions opt = detail::train_options(cfg, cfg.ae_max_epochs, cfg.ae_lr, ctx.log, "train-ae:");
    opt.latent_noise = cfg.ae_latent_noise;
    ctx.log("train-ae: " + std::to_string(sp.train.size()) + " train / " + std::to_string(sp.test.size()) +
            " test frames");
    const LossCurve curve = train_autoencoder(ae, seq.frames, sp.train, sp.test, opt, rng);
    ctx.log("train-ae: best test BCE " + detail::fmt(curve.best_test) + " at epoch " +
            std::to_string(curve.best_epoch));
    Checkpoint ck;
    ck.store(ae.parameters());
    store_viewport(ck, seq.viewport);
    ck.arrays["ae.best_test_bce"] = {curve.best_test};
    ck.arrays["ae.best_epoch"] = {static_cast<double>(curve.best_epoch)};
    detail::stamp(ck, cfg);
    save_checkpoint(m.path(artifact::kAutoencoder), ck);
    detail::write_loss_csv(m.path(artifact::kAeLoss), curve);
  });
  m.record("train-ae", inputs, {artifact::kAutoencoder, artifact::kAeLoss}, secs);
}

/// Latents of the first `count` frames (row-major [count x L]).
inline std::vector<double> encode_all(const Autoencoder<float>& ae, const std::vector<BinaryImage>& frames,
                                      std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  return encode_frames(ae.encoder, frames, idx);
}

inline void stage_train_rnn(const StageContext& ctx) {
  const RunConfig& cfg = ctx.config;
  Manifest m(ctx.dir, cfg);
  std::map<std::string, std::string> inputs;
  const double secs = detail::timed([&] {
    const auto sim = detail::load_sim(m, cfg, "train-rnn");
    const FrameSequence seq = load_frames(m.require("train-rnn", "render", artifact::kFrames));
    const auto bundle = detail::load_autoencoder(m, cfg, "train-rnn");
    for (const char* name : {artifact::kTrajectory, artifact::kFrames, artifact::kAutoencoder}) {
      inputs[name] = file_digest(m.path(name));
    }
    const Splits sp = detail::splits_for(cfg, seq.frames.size(), sim.sensors.rows());
    const std::size_t L = cfg.latent_size, lookback = cfg.lookback;

    const std::vector<double> latents = encode_all(bundle.ae, seq.frames, sp.eval.end);
    const std::span<const double> train_latents(latents.data(), sp.train.size() * L);
    const FeatureMask mask = build_feature_mask(train_latents, L, cfg.mask_threshold);
    std::vector<double> reduced;
    for (std::size_t t = sp.train.begin; t < sp.train.end; ++t) {
      const auto r = mask.mask(std::span<const double>(latents).subspan(t * L, L));
      reduced.insert(reduced.end(), r.begin(), r.end());
    }
    const Normalizer latent_norm = Normalizer::fit(reduced, mask.active_count());
    const Normalizer sensor_norm = Normalizer::fit(
        std::span<const double>(sim.sensors.readings.data(), sp.train.size() * sim.sensors.channels),
        sim.sensors.channels);
    ctx.log("train-rnn: " + std::to_string(mask.active_count()) + " of " + std::to_string(L) +
            " latent features active");

    const std::size_t active = mask.active_count();
    auto targets = [&](const Range& r) {
      auto y = latent_targets(latents, L, mask, latent_norm, r, lookback);
      const std::size_t rows = y.size() / active;
      return Tensor<float>({rows, active}, std::vector<float>(y.begin(), y.end()));
    };
    const Tensor<float> train_x = make_windows<float>(sim.sensors, sensor_norm, sp.train.begin, sp.train.end, lookback);
    const Tensor<float> test_x = make_windows<float>(sim.sensors, sensor_norm, sp.test.begin, sp.test.end, lookback);
    const Tensor<float> train_y = targets(sp.train), test_y = targets(sp.test);

    auto rng = detail::stage_rng(cfg, 2);
    SensorRnn<float> rnn(cfg.rnn_spec(sim.sensors.channels, active), rng);
    const TrainOptions opt = detail::train_options(cfg, cfg.rnn_max_epochs, cfg.rnn_lr, ctx.log, "train-rnn:");
    const LossCurve curve = train_rnn(rnn, train_x, train_y, test_x, test_y, opt, rng);
    ctx.log("train-rnn: best test BCE " + detail::fmt(curve.best_test) + " at epoch " +
            std::to_string(curve.best_epoch));

    Checkpoint ck;
    ck.store(rnn.parameters());
    store_mask(ck, mask);
    store_normalizer(ck, "sensor", sensor_norm);
    store_normalizer(ck, "latent", latent_norm);
    ck.arrays["rnn.best_test_bce"] = {curve.best_test};
    ck.arrays["rnn.best_epoch"] = {static_cast<double>(curve.best_epoch)};
    detail::stamp(ck, cfg);
    save_checkpoint(m.path(artifact::kRnn), ck);
    detail::write_loss_csv(m.path(artifact::kRnnLoss), curve);
  });
  m.record("train-rnn", inputs, {artifact::kRnn, artifact::kRnnLoss}, secs);
}

inline std::string frame_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04zu.pgm", i);
  return buf;
}

inline void stage_imagine(const StageContext& ctx) {
  const RunConfig& cfg = ctx.config;
  Manifest m(ctx.dir, cfg);
  std::map<std::string, std::string> inputs;
  const double secs = detail::timed([&] {
    const auto sim = detail::load_sim(m, cfg, "imagine");
    const FrameSequence seq = load_frames(m.require("imagine", "render", artifact::kFrames));
    const auto ae = detail::load_autoencoder(m, cfg, "imagine");
    const auto rb = detail::load_rnn(m, cfg, "imagine");
    for (const char* name : {artifact::kTrajectory, artifact::kFrames, artifact::kAutoencoder, artifact::kRnn}) {
      inputs[name] = file_digest(m.path(name));
    }
    const Splits sp = detail::splits_for(cfg, seq.frames.size(), sim.sensors.rows());
    SensorTrace segment;
    segment.record_dt = sim.sensors.record_dt;
    segment.channels = sim.sensors.channels;
    segment.readings.assign(sim.sensors.readings.begin() + static_cast<std::ptrdiff_t>(sp.eval.begin * segment.channels),
                            sim.sensors.readings.begin() + static_cast<std::ptrdiff_t>(sp.eval.end * segment.channels));
    const Imagination im = imagine(segment, rb.rnn, ae.ae.decoder, rb.mask, rb.sensor_norm, rb.latent_norm);
    const std::size_t count = im.frames.dim(0), plane = cfg.image_width * cfg.image_height;
    ctx.log("imagine: " + std::to_string(count) + " frames from the " + std::to_string(sp.eval.size()) +
            "-step eval segment");

    fs::remove_all(m.path(artifact::kImaginedDir));
    fs::remove_all(m.path(artifact::kTruthDir));
    fs::create_directories(m.path(artifact::kImaginedDir));
    fs::create_directories(m.path(artifact::kTruthDir));
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> probs(im.frames.data() + i * plane, im.frames.data() + (i + 1) * plane);
      write_pgm(m.path(artifact::kImaginedDir) / frame_name(i), probs, cfg.image_width, cfg.image_height);
      write_pgm(m.path(artifact::kTruthDir) / frame_name(i), seq.frames[sp.eval.begin + cfg.lookback + i]);
    }
    Checkpoint out;
    out.tensors["imagined.frames"] = {0, im.frames.shape(),
                                      std::vector<double>(im.frames.vec().begin(), im.frames.vec().end())};
    out.tensors["imagined.predicted"] = {0, im.predicted.shape(),
                                         std::vector<double>(im.predicted.vec().begin(), im.predicted.vec().end())};
    out.arrays["imagined.first_step"] = {static_cast<double>(sp.eval.begin + cfg.lookback)};
    detail::stamp(out, cfg);
    save_checkpoint(m.path(artifact::kImagined), out);
  });
  m.record("imagine", inputs, {artifact::kImagined}, secs);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

using Metrics = std::map<std::string, double>;

inline void write_metrics(const fs::path& path, const Metrics& metrics) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& [k, v] : metrics) out << k << " = " << detail::fmt(v) << "\n";
}

inline Metrics read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing metrics report " + path.string());
  Metrics m;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    m[line.substr(0, eq)] = std::stod(line.substr(eq + 3));
  }
  return m;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2) return *mid;
  return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

inline void stage_eval(const StageContext& ctx) {
  const RunConfig& cfg = ctx.config;
  Manifest m(ctx.dir, cfg);
  std::map<std::string, std::string> inputs;
  const double secs = detail::timed([&] {
    const auto sim = detail::load_sim(m, cfg, "eval");
    const FrameSequence seq = load_frames(m.require("eval", "render", artifact::kFrames));
    const auto ab = detail::load_autoencoder(m, cfg, "eval");
    const auto rb = detail::load_rnn(m, cfg, "eval");
    const Checkpoint imagined = load_checkpoint(m.require("eval", "imagine", artifact::kImagined));
    detail::check_checkpoint_config(imagined, cfg, artifact::kImagined);
    for (const char* name : {artifact::kTrajectory, artifact::kFrames, artifact::kAutoencoder, artifact::kRnn,
                             artifact::kImagined}) {
      inputs[name] = file_digest(m.path(name));
    }
    const Splits sp = detail::splits_for(cfg, seq.frames.size(), sim.sensors.rows());
    const std::size_t L = cfg.latent_size, lookback = cfg.lookback, plane = cfg.image_width * cfg.image_height;
    const auto& frames_entry = imagined.tensors.at("imagined.frames");
    const std::size_t predictions = frames_entry.shape.at(0);
    const std::size_t expected = sp.eval.size() - lookback;
    if (predictions != expected) {
      throw DependencyError("imagined set has " + std::to_string(predictions) + " frames, eval segment needs " +
                            std::to_string(expected));
    }
    if (static_cast<std::size_t>(imagined.array("imagined.first_step").at(0)) != sp.eval.begin + lookback) {
      throw DependencyError("imagined frames are not aligned with the eval segment");
    }

    Metrics out;
    out["count.train_frames"] = static_cast<double>(sp.train.size());
    out["count.test_frames"] = static_cast<double>(sp.test.size());
    out["count.eval_frames"] = static_cast<double>(sp.eval.size());
    out["count.eval_predictions"] = static_cast<double>(predictions);
    out["count.active_features"] = static_cast<double>(rb.mask.active_count());
    out["count.masked_features"] = static_cast<double>(L - rb.mask.active_count());
    out["ae.best_epoch"] = ab.checkpoint.array("ae.best_epoch").at(0);
    out["rnn.best_epoch"] = rb.checkpoint.array("rnn.best_epoch").at(0);

    // Autoencoder reconstruction.
    const auto test_idx = sp.test.indices(), eval_idx = sp.eval.indices();
    std::vector<std::size_t> seg_idx(expected);
    std::iota(seg_idx.begin(), seg_idx.end(), sp.eval.begin + lookback);
    out["ae.test_bce"] = reconstruction_bce(ab.ae, seq.frames, test_idx);
    out["ae.eval_bce"] = reconstruction_bce(ab.ae, seq.frames, eval_idx);
    out["ae.segment_bce"] = reconstruction_bce(ab.ae, seq.frames, seg_idx);
    out["ae.eval_to_test_ratio"] = out["ae.eval_bce"] / out["ae.test_bce"];

    // Latent smoothness on held-out frames: consecutive vs 1 s apart.
    const std::vector<double> latents = encode_all(ab.ae, seq.frames, sp.eval.end);
    const std::size_t second = static_cast<std::size_t>(std::llround(1.0 / cfg.record_dt));
    if (sp.test.size() > second) {
      std::vector<double> ratios;
      auto dist = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t j = 0; j < L; ++j) s += (latents[a * L + j] - latents[b * L + j]) * (latents[a * L + j] - latents[b * L + j]);
        return std::sqrt(s);
      };
      for (std::size_t t = sp.test.begin; t + second < sp.test.end; ++t) {
        const double far = dist(t, t + second);
        if (far > 0.0) ratios.push_back(dist(t, t + 1) / far);
      }
      out["ae.latent_step_ratio_median"] = median(ratios);
    }

    // Sequence model on test and eval windows.
    const std::size_t active = rb.mask.active_count();
    auto rnn_metrics = [&](const Range& r, const std::string& tag) {
      std::size_t x_clip = 0, y_clip = 0;
      const Tensor<float> x = make_windows<float>(sim.sensors, rb.sensor_norm, r.begin, r.end, lookback, &x_clip);
      const auto y = latent_targets(latents, L, rb.mask, rb.latent_norm, r, lookback, &y_clip);
      const Tensor<float> p = rb.rnn.forward(x);
      out["rnn." + tag + "_bce"] = nn::bce_loss<float, double>(p.span(), y);
      out["rnn." + tag + "_sensor_clip_rate"] = static_cast<double>(x_clip) / static_cast<double>(x.size());
      out["rnn." + tag + "_target_clip_rate"] = static_cast<double>(y_clip) / static_cast<double>(y.size());
      return std::make_pair(p, y);
    };
    rnn_metrics(sp.test, "test");
    const auto [eval_pred, eval_true] = rnn_metrics(sp.eval, "eval");

    // Imagined frames against ground truth.
    std::ofstream frame_csv(m.path(artifact::kFrameBce));
    frame_csv << "t,imagined_bce,reconstruction_bce,imagined_iou\n";
    double bce_sum = 0.0, iou_sum = 0.0;
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < predictions; ++i) {
      const std::size_t t = sp.eval.begin + lookback + i;
      const BinaryImage& truth = seq.frames[t];
      std::vector<float> probs(frames_entry.values.begin() + static_cast<std::ptrdiff_t>(i * plane),
                               frames_entry.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * plane));
      const double bce = nn::bce_loss<float, std::uint8_t>(probs, truth.pixels);
      const double iou = thresholded_iou(probs, truth);
      const std::size_t one = t;
      const double rec = reconstruction_bce(ab.ae, seq.frames, std::span<const std::size_t>(&one, 1));
      bce_sum += bce;
      iou_sum += iou;
      for (std::size_t k = 0; k < plane; ++k) {
        const bool a = probs[k] >= 0.5f, b = truth.pixels[k] != 0;
        inter += a && b;
        uni += a || b;
      }
      frame_csv << detail::fmt(static_cast<double>(t) * cfg.record_dt) << "," << detail::fmt(bce) << ","
                << detail::fmt(rec) << "," << detail::fmt(iou) << "\n";
    }
    out["imagined.pixel_bce"] = bce_sum / static_cast<double>(predictions);
    out["imagined.iou_mean"] = iou_sum / static_cast<double>(predictions);
    out["imagined.iou_pooled"] = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    out["imagined.bce_to_ae_ratio"] = out["imagined.pixel_bce"] / out["ae.segment_bce"];

    // Predicted vs true latent traces over the eval predictions.
    std::ofstream traces(m.path(artifact::kLatentTraces));
    traces << "t,feature_id,true,predicted\n";
    const auto ids = rb.mask.active_indices();
    std::size_t rows = 0;
    for (std::size_t i = 0; i < predictions; ++i, ++rows) {
      const double t = static_cast<double>(sp.eval.begin + lookback + i) * cfg.record_dt;
      for (std::size_t j = 0; j < active; ++j) {
        traces << detail::fmt(t) << "," << ids[j] << "," << detail::fmt(eval_true[i * active + j]) << ","
               << detail::fmt(eval_pred[i * active + j]) << "\n";
      }
    }
    if (rows != expected || eval_pred.dim(0) != expected) {
      throw DependencyError("eval produced " + std::to_string(rows) + " prediction rows, expected " +
                            std::to_string(expected));
    }
    write_metrics(m.path(artifact::kMetrics), out);
    ctx.log("eval: AE test BCE " + detail::fmt(out["ae.test_bce"]) + ", RNN test BCE " +
            detail::fmt(out["rnn.test_bce"]) + ", imagined BCE " + detail::fmt(out["imagined.pixel_bce"]) +
            " (" + detail::fmt(out["imagined.bce_to_ae_ratio"]) + "x AE), IoU " +
            detail::fmt(out["imagined.iou_mean"]) + ", " + std::to_string(rows) + " prediction rows");
  });
  m.record("eval", inputs, {artifact::kMetrics, artifact::kLatentTraces, artifact::kFrameBce}, secs);
}

inline void run_stage(const std::string& name, const StageContext& ctx) {
  if (name == "simulate") return stage_simulate(ctx);
  if (name == "render") return stage_render(ctx);
  if (name == "train-ae") return stage_train_ae(ctx);
  if (name == "train-rnn") return stage_train_rnn(ctx);
  if (name == "imagine") return stage_imagine(ctx);
  if (name == "eval") return stage_eval(ctx);
  throw ConfigError("unknown stage " + name);
}

}  // namespace softsense

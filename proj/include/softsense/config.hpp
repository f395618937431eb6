#pragma once

// RunConfig: every tunable of the simulate -> render -> train -> imagine ->
// evaluate chain, with a `key = value` text form. Defaults reproduce the
// reference experiment (57-node arm, m = 0.01 kg, k = 1 kN/m, b = 0.9 N s/m,
// 100 s at 0.01 s, 84 x 52 frames, lookback 6, 85/10/5 s splits).

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "softsense/errors.hpp"
#include "softsense/hash.hpp"
#include "softsense/models.hpp"
#include "softsense/nn/adam.hpp"
#include "softsense/physics.hpp"

namespace softsense {

struct RunConfig {
  // physics
  BodyConfig body;
  ExcitationParams excitation;
  double duration = 100.0;
  double record_dt = 0.01;
  std::size_t substeps = 100;
  std::string integrator = "rk4";
  // sensing: node-index pairs "a-b,c-d,..."
  std::string sensor_pairs = "6-15,18-27,30-39,42-51";
  // raster
  double viewport_margin = 0.05;
  std::size_t image_width = kImageWidth;
  std::size_t image_height = kImageHeight;
  // models
  std::size_t latent_size = 32;
  std::string encoder_channels = "8,16,32,32";
  std::size_t kernel = 3;
  std::size_t rnn_hidden = 64;
  std::size_t lookback = 6;
  // protocol
  double train_seconds = 85.0;
  double test_seconds = 10.0;
  double eval_seconds = 5.0;
  double mask_threshold = 1e-3;
  // training
  std::size_t batch_size = 64;
  std::size_t ae_max_epochs = 200;
  std::size_t rnn_max_epochs = 300;
  std::size_t patience = 20;
  double ae_lr = 1e-3;
  double rnn_lr = 3e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double ae_latent_noise = 4.0;  // std of logit noise on the code during AE training
  std::uint64_t seed = 1;

  /// All keys and their textual values, sorted by key.
  [[nodiscard]] std::map<std::string, std::string> to_map() const;
  void set(const std::string& key, const std::string& value);
  [[nodiscard]] static std::vector<std::string> keys();

  /// Canonical `key = value` text, one entry per line.
  [[nodiscard]] std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : to_map()) out += k + " = " + v + "\n";
    return out;
  }
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);

  /// Hash over every key except the seed.
  [[nodiscard]] std::string hash() const {
    Fnv1a h;
    for (const auto& [k, v] : to_map()) {
      if (k == "seed") continue;
      h.update(k + "=" + v + "\n");
    }
    return hex_digest(h.value());
  }

  // Derived views.
  [[nodiscard]] SimParams sim_params() const;
  [[nodiscard]] std::vector<std::pair<std::size_t, std::size_t>> sensor_pair_list() const;
  [[nodiscard]] AutoencoderSpec autoencoder_spec() const;
  [[nodiscard]] RnnSpec rnn_spec(std::size_t sensors, std::size_t active_features) const;
  [[nodiscard]] nn::AdamConfig adam(double lr) const { return {lr, adam_beta1, adam_beta2, adam_eps}; }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + s + "' is not a number");
  }
}

template <typename U>
U parse_unsigned(const std::string& key, const std::string& s) {
  U v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': '" + s + "' is not a non-negative integer");
  }
  return v;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto dbl = [&t](const std::string& key, auto member) {
      t[key] = {[member](const RunConfig& c) { return format_double(member(const_cast<RunConfig&>(c))); },
                [member, key](RunConfig& c, const std::string& v) { member(c) = parse_double(key, v); }};
    };
    auto size = [&t](const std::string& key, auto member) {
      t[key] = {[member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
                [member, key](RunConfig& c, const std::string& v) {
                  member(c) = parse_unsigned<std::remove_reference_t<decltype(member(c))>>(key, v);
                }};
    };
    auto str = [&t](const std::string& key, auto member) {
      t[key] = {[member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); },
                [member](RunConfig& c, const std::string& v) { member(c) = v; }};
    };
    size("rows", [](RunConfig& c) -> std::size_t& { return c.body.rows; });
    size("cols", [](RunConfig& c) -> std::size_t& { return c.body.cols; });
    size("node_count", [](RunConfig& c) -> std::size_t& { return c.body.node_count; });
    dbl("spacing", [](RunConfig& c) -> double& { return c.body.spacing; });
    dbl("mass", [](RunConfig& c) -> double& { return c.body.mass; });
    dbl("stiffness", [](RunConfig& c) -> double& { return c.body.stiffness; });
    dbl("damping", [](RunConfig& c) -> double& { return c.body.damping; });
    dbl("gravity", [](RunConfig& c) -> double& { return c.body.gravity; });
    dbl("amplitude", [](RunConfig& c) -> double& { return c.excitation.amplitude; });
    dbl("f1", [](RunConfig& c) -> double& { return c.excitation.f1; });
    dbl("f2", [](RunConfig& c) -> double& { return c.excitation.f2; });
    dbl("f3", [](RunConfig& c) -> double& { return c.excitation.f3; });
    dbl("duration", [](RunConfig& c) -> double& { return c.duration; });
    dbl("record_dt", [](RunConfig& c) -> double& { return c.record_dt; });
    size("substeps", [](RunConfig& c) -> std::size_t& { return c.substeps; });
    str("integrator", [](RunConfig& c) -> std::string& { return c.integrator; });
    str("sensor_pairs", [](RunConfig& c) -> std::string& { return c.sensor_pairs; });
    dbl("viewport_margin", [](RunConfig& c) -> double& { return c.viewport_margin; });
    size("image_width", [](RunConfig& c) -> std::size_t& { return c.image_width; });
    size("image_height", [](RunConfig& c) -> std::size_t& { return c.image_height; });
    size("latent_size", [](RunConfig& c) -> std::size_t& { return c.latent_size; });
    str("encoder_channels", [](RunConfig& c) -> std::string& { return c.encoder_channels; });
    size("kernel", [](RunConfig& c) -> std::size_t& { return c.kernel; });
    size("rnn_hidden", [](RunConfig& c) -> std::size_t& { return c.rnn_hidden; });
    size("lookback", [](RunConfig& c) -> std::size_t& { return c.lookback; });
    dbl("train_seconds", [](RunConfig& c) -> double& { return c.train_seconds; });
    dbl("test_seconds", [](RunConfig& c) -> double& { return c.test_seconds; });
    dbl("eval_seconds", [](RunConfig& c) -> double& { return c.eval_seconds; });
    dbl("mask_threshold", [](RunConfig& c) -> double& { return c.mask_threshold; });
    size("batch_size", [](RunConfig& c) -> std::size_t& { return c.batch_size; });
    size("ae_max_epochs", [](RunConfig& c) -> std::size_t& { return c.ae_max_epochs; });
    size("rnn_max_epochs", [](RunConfig& c) -> std::size_t& { return c.rnn_max_epochs; });
    size("patience", [](RunConfig& c) -> std::size_t& { return c.patience; });
    dbl("ae_lr", [](RunConfig& c) -> double& { return c.ae_lr; });
    dbl("rnn_lr", [](RunConfig& c) -> double& { return c.rnn_lr; });
    dbl("adam_beta1", [](RunConfig& c) -> double& { return c.adam_beta1; });
    dbl("adam_beta2", [](RunConfig& c) -> double& { return c.adam_beta2; });
    dbl("adam_eps", [](RunConfig& c) -> double& { return c.adam_eps; });
    dbl("ae_latent_noise", [](RunConfig& c) -> double& { return c.ae_latent_noise; });
    size("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });
    return t;
  }();
  return table;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_unsigned<std::size_t>(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
  return out;
}

}  // namespace detail

inline std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : detail::fields()) out[k] = f.get(*this);
  return out;
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = detail::fields().find(key);
  if (it == detail::fields().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, detail::trim(value));
}

inline std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : detail::fields()) out.push_back(k);
  return out;
}

inline RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.erase(hash_pos);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " lacks '='");
    cfg.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

inline RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

inline SimParams RunConfig::sim_params() const {
  SimParams p;
  p.excitation = excitation;
  if (integrator == "rk4") {
    p.integrator = Integrator::rk4;
  } else if (integrator == "semi_implicit_euler") {
    p.integrator = Integrator::semi_implicit_euler;
  } else {
    throw ConfigError("unknown integrator '" + integrator + "' (rk4 | semi_implicit_euler)");
  }
  return p;
}

inline std::vector<std::pair<std::size_t, std::size_t>> RunConfig::sensor_pair_list() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::stringstream ss(sensor_pairs);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto dash = item.find('-');
    if (dash == std::string::npos) throw ConfigError("sensor pair '" + item + "' must look like a-b");
    out.emplace_back(detail::parse_unsigned<std::size_t>("sensor_pairs", detail::trim(item.substr(0, dash))),
                     detail::parse_unsigned<std::size_t>("sensor_pairs", detail::trim(item.substr(dash + 1))));
  }
  if (out.empty()) throw ConfigError("no sensor pairs configured");
  return out;
}

inline AutoencoderSpec RunConfig::autoencoder_spec() const {
  AutoencoderSpec s;
  s.image_height = image_height;
  s.image_width = image_width;
  s.channels = detail::parse_list("encoder_channels", encoder_channels);
  s.kernel = kernel;
  s.stride = 2;
  s.pad = kernel / 2;
  s.latent = latent_size;
  if (latent_size == 0) throw ConfigError("latent_size must be positive");
  return s;
}

inline RnnSpec RunConfig::rnn_spec(std::size_t sensors, std::size_t active_features) const {
  if (lookback == 0 || rnn_hidden == 0) throw ConfigError("lookback and rnn_hidden must be positive");
  return {sensors, rnn_hidden, lookback, active_features};
}

}  // namespace softsense

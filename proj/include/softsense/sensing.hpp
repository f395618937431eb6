#pragma once

// Proprioceptive stretch sensors: each reading is the signed change of the
// Euclidean distance between two nodes relative to the rest geometry.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "softsense/errors.hpp"
#include "softsense/physics.hpp"

namespace softsense {

struct StretchSensor {
  std::size_t node_a = 0;
  std::size_t node_b = 0;
  double rest_distance = 0.0;
};

/// Builds a sensor whose rest distance is taken from the model's rest geometry.
inline StretchSensor make_sensor(const BodyModel& model, std::size_t a, std::size_t b) {
  if (a == b) throw ConfigError("sensor must connect two distinct nodes");
  if (a >= model.node_count() || b >= model.node_count()) {
    throw ConfigError("sensor node index out of range");
  }
  const double rest = norm(model.nodes[b].rest - model.nodes[a].rest);
  if (!(rest > 0.0)) throw ConfigError("sensor nodes coincide at rest");
  return {a, b, rest};
}

/// Four sensors along the left edge spanning rows (2,5), (6,9), (10,13), (14,17).
inline std::vector<std::pair<std::size_t, std::size_t>> default_sensor_pairs(std::size_t cols = 3) {
  return {{grid_index(2, 0, cols), grid_index(5, 0, cols)},
          {grid_index(6, 0, cols), grid_index(9, 0, cols)},
          {grid_index(10, 0, cols), grid_index(13, 0, cols)},
          {grid_index(14, 0, cols), grid_index(17, 0, cols)}};
}

inline std::vector<StretchSensor> make_sensors(const BodyModel& model,
                                               const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  std::vector<StretchSensor> out;
  out.reserve(pairs.size());
  for (auto [a, b] : pairs) out.push_back(make_sensor(model, a, b));
  return out;
}

inline double read_sensor(const StretchSensor& sensor, const BodyState& state) {
  return norm(state.positions[sensor.node_b] - state.positions[sensor.node_a]) - sensor.rest_distance;
}

/// Row-major time series: readings[k * channels + j] is sensor j at record k.
struct SensorTrace {
  double record_dt = 0.01;
  std::size_t channels = 0;
  std::vector<double> readings;

  [[nodiscard]] std::size_t rows() const { return channels == 0 ? 0 : readings.size() / channels; }
  [[nodiscard]] double at(std::size_t row, std::size_t ch) const { return readings[row * channels + ch]; }
};

inline SensorTrace sample_sensors(const Trajectory& traj, const std::vector<StretchSensor>& sensors) {
  if (sensors.empty()) throw ConfigError("no sensors configured");
  SensorTrace trace;
  trace.record_dt = traj.record_dt;
  trace.channels = sensors.size();
  trace.readings.reserve(traj.size() * sensors.size());
  for (const BodyState& s : traj.states) {
    for (const StretchSensor& sensor : sensors) {
      if (sensor.node_a >= s.positions.size() || sensor.node_b >= s.positions.size()) {
        throw ConfigError("sensor node index out of range for trajectory");
      }
      trace.readings.push_back(read_sensor(sensor, s));
    }
  }
  return trace;
}

/// CSV with header `t,s1,...,sN`; every value printed with 9 significant digits.
inline void write_sensor_csv(std::ostream& out, const SensorTrace& trace) {
  out << "t";
  for (std::size_t j = 0; j < trace.channels; ++j) out << ",s" << (j + 1);
  out << "\n";
  char buf[32];
  for (std::size_t k = 0; k < trace.rows(); ++k) {
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(k) * trace.record_dt);
    out << buf;
    for (std::size_t j = 0; j < trace.channels; ++j) {
      std::snprintf(buf, sizeof(buf), ",%.9g", trace.at(k, j));
      out << buf;
    }
    out << "\n";
  }
}

inline void save_sensor_csv(const std::filesystem::path& path, const SensorTrace& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_sensor_csv(out, trace);
}

inline SensorTrace load_sensor_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing sensor file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("t", 0) != 0) throw FormatError("sensor CSV lacks header");
  SensorTrace trace;
  trace.channels = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  std::vector<double> times;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t pos = 0;
    std::size_t field = 0;
    while (pos <= line.size()) {
      const std::size_t next = std::min(line.find(',', pos), line.size());
      const double v = std::stod(line.substr(pos, next - pos));
      if (field == 0) times.push_back(v); else trace.readings.push_back(v);
      ++field;
      pos = next + 1;
    }
    if (field != trace.channels + 1) throw FormatError("sensor CSV row has wrong field count");
  }
  trace.record_dt = times.size() > 1 ? times[1] - times[0] : 0.01;
  return trace;
}

}  // namespace softsense

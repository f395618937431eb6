#pragma once

// SSTJ1 trajectory container:
//   "SSTJ1" | u32 node_count | f64 record_dt | u64 state_count
//   | f64 amplitude, f1, f2, f3 | u64 body_config_hash
//   | per state: node_count * (x, y) positions, then node_count * (vx, vy)
// All numbers little-endian. State k has time k * record_dt.

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "softsense/binary_io.hpp"
#include "softsense/physics.hpp"

namespace softsense {

inline constexpr std::string_view kTrajectoryMagic = "SSTJ1";

struct TrajectoryFile {
  Trajectory trajectory;
  ExcitationParams excitation;
  std::uint64_t body_hash = 0;
};

inline void write_trajectory(std::ostream& out, const Trajectory& traj, const ExcitationParams& exc,
                             std::uint64_t body_hash) {
  const std::size_t nodes = traj.states.empty() ? 0 : traj.states.front().positions.size();
  binio::write_magic(out, kTrajectoryMagic);
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(nodes));
  binio::write<double>(out, traj.record_dt);
  binio::write<std::uint64_t>(out, traj.states.size());
  binio::write<double>(out, exc.amplitude);
  binio::write<double>(out, exc.f1);
  binio::write<double>(out, exc.f2);
  binio::write<double>(out, exc.f3);
  binio::write<std::uint64_t>(out, body_hash);
  static_assert(sizeof(Vec2) == 2 * sizeof(double));
  for (const BodyState& s : traj.states) {
    if (s.positions.size() != nodes || s.velocities.size() != nodes) {
      throw ShapeError("trajectory states have inconsistent node counts");
    }
    binio::write_array(out, reinterpret_cast<const double*>(s.positions.data()), 2 * nodes);
    binio::write_array(out, reinterpret_cast<const double*>(s.velocities.data()), 2 * nodes);
  }
}

inline TrajectoryFile read_trajectory(std::istream& in) {
  binio::expect_magic(in, kTrajectoryMagic);
  TrajectoryFile f;
  const auto nodes = binio::read<std::uint32_t>(in);
  f.trajectory.record_dt = binio::read<double>(in);
  const auto count = binio::read<std::uint64_t>(in);
  f.excitation.amplitude = binio::read<double>(in);
  f.excitation.f1 = binio::read<double>(in);
  f.excitation.f2 = binio::read<double>(in);
  f.excitation.f3 = binio::read<double>(in);
  f.body_hash = binio::read<std::uint64_t>(in);
  if (count > (1ULL << 32)) throw FormatError("implausible state count");
  f.trajectory.states.resize(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    BodyState& s = f.trajectory.states[k];
    s.t = static_cast<double>(k) * f.trajectory.record_dt;
    s.positions.resize(nodes);
    s.velocities.resize(nodes);
    binio::read_array(in, reinterpret_cast<double*>(s.positions.data()), 2 * nodes);
    binio::read_array(in, reinterpret_cast<double*>(s.velocities.data()), 2 * nodes);
  }
  return f;
}

inline void save_trajectory(const std::filesystem::path& path, const Trajectory& traj,
                            const ExcitationParams& exc, std::uint64_t body_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_trajectory(out, traj, exc, body_hash);
}

inline TrajectoryFile load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("missing trajectory file " + path.string());
  return read_trajectory(in);
}

}  // namespace softsense

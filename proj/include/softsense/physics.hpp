#pragma once

// 2D mass-spring-damper arm: body construction, element forces, fixed-step
// integration with a horizontally driven top row, and trajectory recording.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "softsense/errors.hpp"
#include "softsense/hash.hpp"

namespace softsense {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2& operator+=(Vec2 o) { x += o.x; y += o.y; return *this; }
  constexpr Vec2& operator-=(Vec2 o) { x -= o.x; y -= o.y; return *this; }
  friend constexpr Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend constexpr Vec2 operator-(Vec2 a) { return {-a.x, -a.y}; }
  friend constexpr Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend constexpr bool operator==(Vec2, Vec2) = default;
};

constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

// ---------------------------------------------------------------------------
// Excitation
// ---------------------------------------------------------------------------

struct ExcitationParams {
  double amplitude = 0.03;  // m
  double f1 = 2.11;         // Hz
  double f2 = 3.73;
  double f3 = 4.33;
};

/// Horizontal displacement of the driven row: A sin(2πf1 t) sin(2πf2 t) sin(2πf3 t).
inline double excitation(double t, const ExcitationParams& p) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  return p.amplitude * std::sin(two_pi * p.f1 * t) * std::sin(two_pi * p.f2 * t) *
         std::sin(two_pi * p.f3 * t);
}

// ---------------------------------------------------------------------------
// Body model
// ---------------------------------------------------------------------------

struct Node {
  double mass = 0.0;
  Vec2 rest;
  bool driven = false;
};

/// Viscous-elastic element: linear spring in parallel with an axial damper.
struct Element {
  std::size_t a = 0;
  std::size_t b = 0;
  double rest_length = 0.0;
  double stiffness = 0.0;
  double damping = 0.0;
};

/// Quadrilateral cell, counter-clockwise in world coordinates (y up).
using Cell = std::array<std::size_t, 4>;

struct BodyModel {
  std::vector<Node> nodes;
  std::vector<Element> elements;
  std::vector<Cell> cells;
  Vec2 gravity;

  [[nodiscard]] std::size_t node_count() const { return nodes.size(); }

  void validate() const {
    if (nodes.empty()) throw ConfigError("body has no nodes");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (!(nodes[i].mass > 0.0)) {
        throw ConfigError("node " + std::to_string(i) + " has non-positive mass");
      }
    }
    for (std::size_t e = 0; e < elements.size(); ++e) {
      const Element& el = elements[e];
      const std::string tag = "element " + std::to_string(e);
      if (el.a == el.b) throw ConfigError(tag + " connects a node to itself");
      if (el.a >= nodes.size() || el.b >= nodes.size()) {
        throw ConfigError(tag + " references a node out of range");
      }
      if (!(el.rest_length > 0.0)) throw ConfigError(tag + " has non-positive rest length");
      if (!(el.stiffness > 0.0)) throw ConfigError(tag + " has non-positive stiffness");
      if (!(el.damping >= 0.0)) throw ConfigError(tag + " has negative damping");
    }
  }
};

struct BodyConfig {
  std::size_t rows = 19;
  std::size_t cols = 3;
  std::size_t node_count = 57;
  double spacing = 0.1;      // m
  double mass = 0.01;        // kg
  double stiffness = 1000.0; // N/m
  double damping = 0.9;      // N s/m
  double gravity = 0.0;      // m/s^2, acts along -y

  /// Canonical text form; the body hash in trajectory headers is taken over it.
  [[nodiscard]] std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "rows=" << rows << ";cols=" << cols << ";nodes=" << node_count << ";spacing=" << spacing
       << ";mass=" << mass << ";k=" << stiffness << ";b=" << damping << ";g=" << gravity;
    return os.str();
  }
  [[nodiscard]] std::uint64_t hash() const { return fnv1a(canonical()); }
};

/// Index of the node at (row, col) in a grid body; row 0 is the driven top row.
constexpr std::size_t grid_index(std::size_t row, std::size_t col, std::size_t cols) {
  return row * cols + col;
}

/// Cross-braced rectangular grid hanging downward from y = 0. Elements are the
/// horizontal and vertical neighbours plus both diagonals of every cell.
inline BodyModel build_body(const BodyConfig& cfg) {
  if (cfg.rows == 0 || cfg.cols == 0 || cfg.rows * cfg.cols != cfg.node_count) {
    throw ConfigError("node count " + std::to_string(cfg.node_count) + " != rows x cols (" +
                      std::to_string(cfg.rows) + " x " + std::to_string(cfg.cols) + ")");
  }
  if (!(cfg.spacing > 0.0)) throw ConfigError("grid spacing must be positive");

  BodyModel model;
  model.gravity = {0.0, -cfg.gravity};
  model.nodes.reserve(cfg.node_count);
  for (std::size_t r = 0; r < cfg.rows; ++r) {
    for (std::size_t c = 0; c < cfg.cols; ++c) {
      model.nodes.push_back({cfg.mass,
                             {static_cast<double>(c) * cfg.spacing, -static_cast<double>(r) * cfg.spacing},
                             r == 0});
    }
  }

  auto connect = [&](std::size_t a, std::size_t b) {
    const double rest = norm(model.nodes[b].rest - model.nodes[a].rest);
    model.elements.push_back({a, b, rest, cfg.stiffness, cfg.damping});
  };
  for (std::size_t r = 0; r < cfg.rows; ++r) {
    for (std::size_t c = 0; c < cfg.cols; ++c) {
      const std::size_t here = grid_index(r, c, cfg.cols);
      if (c + 1 < cfg.cols) connect(here, grid_index(r, c + 1, cfg.cols));
      if (r + 1 < cfg.rows) connect(here, grid_index(r + 1, c, cfg.cols));
      if (r + 1 < cfg.rows && c + 1 < cfg.cols) {
        connect(here, grid_index(r + 1, c + 1, cfg.cols));
        connect(grid_index(r, c + 1, cfg.cols), grid_index(r + 1, c, cfg.cols));
        // Counter-clockwise with y up: lower-left, lower-right, upper-right, upper-left.
        model.cells.push_back({grid_index(r + 1, c, cfg.cols), grid_index(r + 1, c + 1, cfg.cols),
                               grid_index(r, c + 1, cfg.cols), here});
      }
    }
  }
  model.validate();
  return model;
}

// ---------------------------------------------------------------------------
// State and forces
// ---------------------------------------------------------------------------

struct BodyState {
  double t = 0.0;
  std::vector<Vec2> positions;
  std::vector<Vec2> velocities;
};

inline BodyState rest_state(const BodyModel& model) {
  BodyState s;
  s.positions.reserve(model.node_count());
  for (const Node& n : model.nodes) s.positions.push_back(n.rest);
  s.velocities.assign(model.node_count(), Vec2{});
  return s;
}

/// Force exerted on node `a` by the element; node `b` receives the negation.
inline Vec2 element_force(const Element& el, Vec2 pos_a, Vec2 pos_b, Vec2 vel_a, Vec2 vel_b) {
  const Vec2 d = pos_b - pos_a;
  const double length = norm(d);
  if (!(length > 0.0)) {
    throw DegenerateGeometryError("element nodes " + std::to_string(el.a) + " and " +
                                  std::to_string(el.b) + " coincide");
  }
  const Vec2 axis = (1.0 / length) * d;
  const double separating_speed = dot(vel_b - vel_a, axis);
  const double tension = el.stiffness * (length - el.rest_length) + el.damping * separating_speed;
  return tension * axis;
}

/// Kinetic energy of all nodes plus elastic energy of all springs.
inline double mechanical_energy(const BodyModel& model, const BodyState& s) {
  double energy = 0.0;
  for (std::size_t i = 0; i < model.node_count(); ++i) {
    energy += 0.5 * model.nodes[i].mass * dot(s.velocities[i], s.velocities[i]);
  }
  for (const Element& el : model.elements) {
    const double stretch = norm(s.positions[el.b] - s.positions[el.a]) - el.rest_length;
    energy += 0.5 * el.stiffness * stretch * stretch;
  }
  return energy;
}

/// Sum of element forces per node (no gravity, no driving).
inline void accumulate_element_forces(const BodyModel& model, const std::vector<Vec2>& pos,
                                      const std::vector<Vec2>& vel, std::vector<Vec2>& force) {
  force.assign(model.node_count(), Vec2{});
  for (const Element& el : model.elements) {
    const Vec2 f = element_force(el, pos[el.a], pos[el.b], vel[el.a], vel[el.b]);
    force[el.a] += f;
    force[el.b] -= f;
  }
}

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

enum class Integrator { rk4, semi_implicit_euler };

struct SimParams {
  ExcitationParams excitation;
  Integrator integrator = Integrator::rk4;
};

namespace detail {

// Accelerations for the current configuration. Driven nodes move at the constant
// velocity already stored for them over the step, so their acceleration is zero.
inline void accelerations(const BodyModel& model, const std::vector<Vec2>& pos,
                          const std::vector<Vec2>& vel, std::vector<Vec2>& force,
                          std::vector<Vec2>& acc) {
  accumulate_element_forces(model, pos, vel, force);
  acc.resize(model.node_count());
  for (std::size_t i = 0; i < model.node_count(); ++i) {
    const Node& n = model.nodes[i];
    acc[i] = n.driven ? Vec2{} : (1.0 / n.mass) * force[i] + model.gravity;
  }
}

inline void check_finite(const BodyState& s) {
  for (std::size_t i = 0; i < s.positions.size(); ++i) {
    const Vec2 p = s.positions[i];
    const Vec2 v = s.velocities[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(v.x) || !std::isfinite(v.y)) {
      throw DivergenceError("non-finite state at node " + std::to_string(i) + ", t = " +
                            std::to_string(s.t) + " s");
    }
  }
}

}  // namespace detail

/// Reusable scratch buffers so the inner loop does not allocate.
struct StepWorkspace {
  std::vector<Vec2> force, p1, v1, k1x, k1v, k2x, k2v, k3x, k3v, k4x, k4v;
};

/// Advance `state` by dt. Driven nodes travel in a straight line from the
/// excitation at t to the excitation at t + dt, with the finite-difference
/// velocity; their vertical coordinate stays at rest.
inline void step_in_place(const BodyModel& model, BodyState& state, double dt, const SimParams& params,
                          StepWorkspace& ws, double t_next) {
  const std::size_t n = model.node_count();
  const double shift_now = excitation(state.t, params.excitation);
  const double shift_next = excitation(t_next, params.excitation);
  const double drive_speed = (shift_next - shift_now) / dt;
  for (std::size_t i = 0; i < n; ++i) {
    if (model.nodes[i].driven) {
      state.positions[i] = {model.nodes[i].rest.x + shift_now, model.nodes[i].rest.y};
      state.velocities[i] = {drive_speed, 0.0};
    }
  }

  std::vector<Vec2>& x = state.positions;
  std::vector<Vec2>& v = state.velocities;

  if (params.integrator == Integrator::semi_implicit_euler) {
    detail::accelerations(model, x, v, ws.force, ws.k1v);
    for (std::size_t i = 0; i < n; ++i) {
      v[i] += dt * ws.k1v[i];
      x[i] += dt * v[i];
    }
  } else {
    ws.p1.resize(n);
    ws.v1.resize(n);
    // k1
    detail::accelerations(model, x, v, ws.force, ws.k1v);
    ws.k1x = v;
    // k2
    for (std::size_t i = 0; i < n; ++i) {
      ws.p1[i] = x[i] + (0.5 * dt) * ws.k1x[i];
      ws.v1[i] = v[i] + (0.5 * dt) * ws.k1v[i];
    }
    detail::accelerations(model, ws.p1, ws.v1, ws.force, ws.k2v);
    ws.k2x = ws.v1;
    // k3
    for (std::size_t i = 0; i < n; ++i) {
      ws.p1[i] = x[i] + (0.5 * dt) * ws.k2x[i];
      ws.v1[i] = v[i] + (0.5 * dt) * ws.k2v[i];
    }
    detail::accelerations(model, ws.p1, ws.v1, ws.force, ws.k3v);
    ws.k3x = ws.v1;
    // k4
    for (std::size_t i = 0; i < n; ++i) {
      ws.p1[i] = x[i] + dt * ws.k3x[i];
      ws.v1[i] = v[i] + dt * ws.k3v[i];
    }
    detail::accelerations(model, ws.p1, ws.v1, ws.force, ws.k4v);
    ws.k4x = ws.v1;
    const double w = dt / 6.0;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += w * (ws.k1x[i] + 2.0 * ws.k2x[i] + 2.0 * ws.k3x[i] + ws.k4x[i]);
      v[i] += w * (ws.k1v[i] + 2.0 * ws.k2v[i] + 2.0 * ws.k3v[i] + ws.k4v[i]);
    }
  }

  state.t = t_next;
  for (std::size_t i = 0; i < n; ++i) {
    if (model.nodes[i].driven) {
      x[i] = {model.nodes[i].rest.x + shift_next, model.nodes[i].rest.y};
      v[i] = {drive_speed, 0.0};
    }
  }
  detail::check_finite(state);
}

inline BodyState step(const BodyModel& model, const BodyState& state, double dt,
                      const SimParams& params = {}) {
  if (!(dt > 0.0)) throw ConfigError("integration step must be positive");
  BodyState next = state;
  StepWorkspace ws;
  step_in_place(model, next, dt, params, ws, state.t + dt);
  return next;
}

struct Trajectory {
  double record_dt = 0.01;
  std::vector<BodyState> states;

  [[nodiscard]] std::size_t size() const { return states.size(); }
};

/// Integrate from rest for `duration` seconds, recording every `record_dt`
/// (1 + duration/record_dt states). Internal step is record_dt / substeps;
/// times are computed from integer step counts so they do not drift.
inline Trajectory simulate(const BodyModel& model, const SimParams& params, double duration = 100.0,
                           double record_dt = 0.01, std::size_t substeps = 100) {
  if (!(record_dt > 0.0)) throw ConfigError("record_dt must be positive");
  if (substeps < 1) throw ConfigError("substeps must be at least 1");
  const double records = duration / record_dt;
  const auto n_records = static_cast<std::size_t>(std::llround(records));
  if (!(duration >= 0.0) || std::abs(records - static_cast<double>(n_records)) > 1e-9 * (1.0 + records)) {
    throw ConfigError("duration must be a non-negative integral multiple of record_dt");
  }
  model.validate();

  Trajectory traj;
  traj.record_dt = record_dt;
  traj.states.reserve(n_records + 1);
  BodyState state = rest_state(model);
  traj.states.push_back(state);

  const double h = record_dt / static_cast<double>(substeps);
  StepWorkspace ws;
  for (std::size_t r = 1; r <= n_records; ++r) {
    for (std::size_t s = 1; s <= substeps; ++s) {
      const double t_next = (static_cast<double>((r - 1) * substeps + s)) * h;
      step_in_place(model, state, h, params, ws, t_next);
    }
    state.t = static_cast<double>(r) * record_dt;
    traj.states.push_back(state);
  }
  return traj;
}

}  // namespace softsense

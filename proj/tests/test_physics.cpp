#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <random>
#include <vector>

#include "softsense/physics.hpp"

using namespace softsense;

namespace {

// Two-node model: a driven anchor at the origin and a free mass on one spring.
BodyModel single_oscillator(double mass, double k, double b) {
  BodyModel m;
  m.nodes = {{1.0, {0.0, 0.0}, true}, {mass, {1.0, 0.0}, false}};
  m.elements = {{0, 1, 1.0, k, b}};
  return m;
}

// Times at which x(t) - 1 crosses zero going upward.
std::vector<double> upward_crossings(const BodyModel& model, BodyState s, double dt, std::size_t steps,
                                     std::vector<double>* peaks = nullptr) {
  std::vector<double> times;
  SimParams params;
  params.excitation.amplitude = 0.0;
  double prev = s.positions[1].x - 1.0, prev_prev = prev;
  for (std::size_t i = 0; i < steps; ++i) {
    s = step(model, s, dt, params);
    const double x = s.positions[1].x - 1.0;
    if (prev < 0.0 && x >= 0.0) times.push_back(s.t - dt * x / (x - prev));
    if (peaks && prev > prev_prev && prev > x && prev > 0.0) peaks->push_back(prev);
    prev_prev = prev;
    prev = x;
  }
  return times;
}

}  // namespace

TEST(Excitation, ZeroAtOrigin) {
  ExcitationParams p;
  p.amplitude = 5.0;
  EXPECT_EQ(excitation(0.0, p), 0.0);
}

TEST(Excitation, HundredSecondPeriod) {
  ExcitationParams p;
  p.amplitude = 1.0;
  for (double t : {0.0, 0.013, 0.25, 1.37, 17.5, 42.001, 63.3}) {
    EXPECT_NEAR(excitation(t + 100.0, p), excitation(t, p), 1e-9) << "t = " << t;
  }
}

TEST(Excitation, MatchesIndependentEvaluation) {
  // Frozen from tests/oracles/excitation_oracle.py (30-digit arithmetic).
  ExcitationParams p;
  p.amplitude = 1.0;
  EXPECT_NEAR(excitation(0.25, p), 0.035054341631229134, 1e-14);
  EXPECT_NEAR(excitation(1.37, p), 0.16736377219197424, 1e-14);
  EXPECT_NEAR(excitation(42.001, p), -0.44770228660766605, 1e-12);
}

TEST(ElementForce, ZeroAtRest) {
  const Element el{0, 1, 1.0, 1000.0, 0.9};
  const Vec2 f = element_force(el, {0, 0}, {1, 0}, {}, {});
  EXPECT_EQ(f, (Vec2{0.0, 0.0}));
}

TEST(ElementForce, HookeStretch) {
  const Element el{0, 1, 1.0, 1000.0, 0.9};
  const Vec2 f = element_force(el, {0, 0}, {1.1, 0}, {}, {});
  EXPECT_NEAR(f.x, 100.0, 1e-9);
  EXPECT_NEAR(f.y, 0.0, 1e-12);
}

TEST(ElementForce, StretchPlusAxialSpeedMatchesFormula) {
  const Element el{0, 1, 0.5, 1000.0, 0.9};
  const Vec2 pa{0.2, -0.1}, pb{0.5, 0.35};
  const Vec2 va{0.3, -0.2}, vb{-0.4, 0.7};
  // Direct evaluation: unit axis, extension x, separating speed v.
  const double dx = 0.3, dy = 0.45;
  const double len = std::sqrt(dx * dx + dy * dy);
  const double ux = dx / len, uy = dy / len;
  const double v = (-0.4 - 0.3) * ux + (0.7 + 0.2) * uy;
  const double mag = 1000.0 * (len - 0.5) + 0.9 * v;
  const Vec2 f = element_force(el, pa, pb, va, vb);
  EXPECT_NEAR(f.x, mag * ux, 1e-10);
  EXPECT_NEAR(f.y, mag * uy, 1e-10);
  // Closing speed reduces tension.
  const Vec2 closing = element_force(el, pa, pb, {}, {-ux, -uy});
  EXPECT_NEAR(norm(closing), 1000.0 * (len - 0.5) - 0.9, 1e-9);
}

TEST(ElementForce, CoincidentNodesThrow) {
  const Element el{0, 1, 1.0, 1000.0, 0.9};
  EXPECT_THROW(element_force(el, {1, 1}, {1, 1}, {}, {}), DegenerateGeometryError);
}

TEST(BuildBody, DefaultHas57Nodes) {
  const BodyModel m = build_body(BodyConfig{});
  EXPECT_EQ(m.node_count(), 57u);
  for (std::size_t i = 0; i < m.node_count(); ++i) EXPECT_EQ(m.nodes[i].driven, i < 3) << i;
  EXPECT_EQ(m.cells.size(), 18u * 2u);
}

TEST(BuildBody, TwoByTwoGrid) {
  BodyConfig cfg;
  cfg.rows = 2;
  cfg.cols = 2;
  cfg.node_count = 4;
  const BodyModel m = build_body(cfg);
  EXPECT_EQ(m.node_count(), 4u);
  EXPECT_EQ(m.elements.size(), 6u);
}

TEST(BuildBody, ElementCountMatchesEnumeration) {
  const BodyConfig cfg;
  const BodyModel m = build_body(cfg);
  // Every unordered pair of grid nodes that are 8-neighbours.
  std::size_t pairs = 0;
  for (long a = 0; a < 57; ++a)
    for (long b = a + 1; b < 57; ++b) {
      const long dr = std::labs(a / 3 - b / 3), dc = std::labs(a % 3 - b % 3);
      if (std::max(dr, dc) == 1) ++pairs;
    }
  EXPECT_EQ(m.elements.size(), pairs);
  EXPECT_EQ(pairs, 164u);
  for (const Element& e : m.elements) {
    EXPECT_NEAR(e.rest_length, norm(m.nodes[e.b].rest - m.nodes[e.a].rest), 0.0);
  }
}

TEST(BuildBody, NodeCountMismatchThrows) {
  BodyConfig cfg;
  cfg.rows = 20;
  EXPECT_THROW(build_body(cfg), ConfigError);
}

TEST(Step, EquilibriumIsFixedPoint) {
  const BodyModel m = build_body(BodyConfig{});
  SimParams params;
  params.excitation.amplitude = 0.0;
  const BodyState s0 = rest_state(m);
  const BodyState s1 = step(m, s0, 1e-4, params);
  EXPECT_EQ(s1.positions, s0.positions);
  EXPECT_EQ(s1.velocities, s0.velocities);
}

TEST(Step, UndampedPeriodMatchesAnalytic) {
  const BodyModel m = single_oscillator(0.01, 1000.0, 0.0);
  BodyState s = rest_state(m);
  s.positions[1].x += 0.01;
  const auto times = upward_crossings(m, s, 1e-5, 20000);
  ASSERT_GE(times.size(), 5u);
  const double period = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
  const double expected = 2.0 * std::numbers::pi * std::sqrt(0.01 / 1000.0);
  EXPECT_NEAR(period / expected, 1.0, 0.01);
}

TEST(Step, DampedEnvelopeDecaysAtRate) {
  const double mass = 0.01, b = 0.9;
  const BodyModel m = single_oscillator(mass, 1000.0, b);
  BodyState s = rest_state(m);
  s.positions[1].x += 0.01;
  std::vector<double> peaks;
  const auto times = upward_crossings(m, s, 1e-6, 100000, &peaks);
  ASSERT_GE(times.size(), 3u);
  ASSERT_GE(peaks.size(), 3u);
  const double period = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
  // Successive peaks shrink by exp(-b T / 2m).
  for (std::size_t i = 0; i + 1 < peaks.size(); ++i) {
    const double ratio = peaks[i + 1] / peaks[i];
    EXPECT_NEAR(std::log(ratio) / (-b * period / (2.0 * mass)), 1.0, 0.01);
  }
}

TEST(Step, DivergenceIsReported) {
  const BodyModel m = build_body(BodyConfig{});
  BodyState s = rest_state(m);
  s.velocities[56] = {50.0, 0.0};
  SimParams params;
  try {
    for (int i = 0; i < 2000; ++i) s = step(m, s, 0.05, params);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("node"), std::string::npos);
  }
}

TEST(Simulate, RecordCount) {
  const BodyModel m = build_body(BodyConfig{});
  const Trajectory t = simulate(m, SimParams{}, 1.0, 0.01, 100);
  ASSERT_EQ(t.size(), 101u);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_DOUBLE_EQ(t.states[i].t, static_cast<double>(i) * 0.01);
  EXPECT_THROW(simulate(m, SimParams{}, 1.005, 0.01, 100), ConfigError);
  EXPECT_THROW(simulate(m, SimParams{}, 1.0, 0.01, 0), ConfigError);
}

TEST(Simulate, ZeroAmplitudeStaysAtRest) {
  const BodyModel m = build_body(BodyConfig{});
  SimParams p;
  p.excitation.amplitude = 0.0;
  const Trajectory t = simulate(m, p, 0.5, 0.01, 100);
  const BodyState rest = rest_state(m);
  for (const BodyState& s : t.states) {
    EXPECT_EQ(s.positions, rest.positions);
    EXPECT_EQ(s.velocities, rest.velocities);
  }
}

TEST(Simulate, DrivenRowFollowsExcitation) {
  const BodyModel m = build_body(BodyConfig{});
  SimParams p;
  const Trajectory t = simulate(m, p, 0.5, 0.01, 100);
  for (const BodyState& s : t.states)
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(s.positions[i].x, m.nodes[i].rest.x + excitation(s.t, p.excitation), 1e-12);
      EXPECT_EQ(s.positions[i].y, m.nodes[i].rest.y);
    }
}

// --- invariants ---------------------------------------------------------------

TEST(PhysicsInvariants, EquilibriumOverTenSeconds) {
  const BodyModel m = build_body(BodyConfig{});
  SimParams p;
  p.excitation.amplitude = 0.0;
  const Trajectory t = simulate(m, p, 10.0, 0.01, 100);
  double worst = 0.0;
  for (const BodyState& s : t.states)
    for (std::size_t i = 0; i < m.node_count(); ++i) worst = std::max(worst, norm(s.positions[i] - m.nodes[i].rest));
  EXPECT_LT(worst, 1e-9);
}

TEST(PhysicsInvariants, EnergyNonIncreasingWithoutDrive) {
  const BodyModel m = build_body(BodyConfig{});
  BodyState s = rest_state(m);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> kick(-0.3, 0.3);
  for (std::size_t i = 3; i < m.node_count(); ++i) s.velocities[i] = {kick(rng), kick(rng)};
  SimParams p;
  p.excitation.amplitude = 0.0;
  StepWorkspace ws;
  double prev = mechanical_energy(m, s);
  const double initial = prev;
  for (int rec = 0; rec < 300; ++rec) {
    for (int k = 0; k < 100; ++k) step_in_place(m, s, 1e-4, p, ws, s.t + 1e-4);
    const double e = mechanical_energy(m, s);
    EXPECT_LE(e, prev * (1.0 + 1e-6)) << "record " << rec;
    prev = e;
  }
  EXPECT_LT(prev, 0.5 * initial);
}

TEST(PhysicsInvariants, InternalForcesSumToZero) {
  BodyConfig cfg;
  BodyModel m = build_body(cfg);
  for (Node& n : m.nodes) n.driven = false;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);
  for (int trial = 0; trial < 10; ++trial) {
    BodyState s = rest_state(m);
    for (std::size_t i = 0; i < m.node_count(); ++i) {
      s.positions[i] += Vec2{jitter(rng), jitter(rng)};
      s.velocities[i] = {10 * jitter(rng), 10 * jitter(rng)};
    }
    std::vector<Vec2> force;
    accumulate_element_forces(m, s.positions, s.velocities, force);
    Vec2 total;
    for (Vec2 f : force) total += f;
    EXPECT_LT(norm(total), 1e-9);
  }
}

TEST(PhysicsInvariants, DeterministicBytes) {
  const BodyModel m = build_body(BodyConfig{});
  const Trajectory a = simulate(m, SimParams{}, 2.0, 0.01, 100);
  const Trajectory b = simulate(m, SimParams{}, 2.0, 0.01, 100);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(std::memcmp(a.states[i].positions.data(), b.states[i].positions.data(), 57 * sizeof(Vec2)), 0);
    EXPECT_EQ(std::memcmp(a.states[i].velocities.data(), b.states[i].velocities.data(), 57 * sizeof(Vec2)), 0);
  }
}

TEST(PhysicsInvariants, SubstepHalvingConverges) {
  const BodyModel m = build_body(BodyConfig{});
  const SimParams p;
  const std::size_t tip = 56;
  const Vec2 coarse = simulate(m, p, 5.0, 0.01, 50).states.back().positions[tip];
  const Vec2 mid = simulate(m, p, 5.0, 0.01, 100).states.back().positions[tip];
  const Vec2 fine = simulate(m, p, 5.0, 0.01, 200).states.back().positions[tip];
  EXPECT_LT(norm(fine - mid), 1e-4);
  EXPECT_LE(norm(fine - mid), norm(mid - coarse));
}

#include "backlash/optimal.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace backlash;

namespace {

SystemState st(double y, double w) { return {Vec(0), y, Vec(0), w}; }

SolveOptions coarse() {
  SolveOptions o;
  o.oracle.grid = 0.1;
  o.oracle.max_switches = 3;
  return o;
}

SolveOutcome solve(const SystemState& from, const SystemState& to, const Dynamics& dyn = Dynamics::limit()) {
  SolveOptions o = coarse();
  o.oracle_target = TargetSpec::point(to, 0.1);
  return solve_time_optimal(builtin_example1(), dyn, from, TargetSpec::point(to), o);
}

}  // namespace

TEST(Target, PointAndEllipsoid) {
  const TargetSpec p = TargetSpec::point(st(-1, 0), 0.5);
  Vec z(2);
  z << -1.3, 0.4;
  EXPECT_NEAR(p.residual(z), 0.5, 1e-12);
  EXPECT_NEAR(p.value(z), 0.0, 1e-12);

  Mat V = Mat::Identity(2, 2);
  V(1, 1) = 4;
  const TargetSpec e = TargetSpec::ellipsoid(Vec::Zero(2), V, 1.0);
  z << 0.0, 0.5;
  EXPECT_NEAR(e.value(z), 0.0, 1e-12);
  z << 0.0, 0.49;
  EXPECT_TRUE(e.contains(z));
  EXPECT_THROW(TargetSpec::ellipsoid(Vec::Zero(2), -V, 1.0).validate(0), ContractViolation);
}

TEST(Reach, InitialStateInsideGivesZero) {
  const BangBangControl c{Vec::Constant(1, 1.0), {{}}, 5.0};
  EXPECT_EQ(reach_time_bisection(builtin_example1(), Dynamics::limit(), c, st(-1, 0),
                                 TargetSpec::point(st(-1, 0)), {}),
            0.0);
}

TEST(Reach, ParabolaCrossing) {
  // y = -1 + t^2/2 enters |(y, w) - (-0.5, 1)| <= 1e-4 at t = 1 (minus a tangential margin).
  const BangBangControl c{Vec::Constant(1, 1.0), {{}}, 5.0};
  const double T =
      reach_time_bisection(builtin_example1(), Dynamics::limit(), c, st(-1, 0), TargetSpec::point(st(-0.5, 1)), {});
  EXPECT_NEAR(T, 1.0, 2e-4);
  EXPECT_LT(T, 1.0);
}

TEST(Reach, EllipsoidMatchesDenseSampling) {
  const CanonicalModel m = builtin_example1();
  Mat V(2, 2);
  V << 2.0, 0.3, 0.3, 1.0;
  const TargetSpec e = TargetSpec::ellipsoid(pack(st(-1, 0)), V, 0.05);
  const BangBangControl c{Vec::Constant(1, 1.0), {{1.0}}, 6.0};
  const double T = reach_time_bisection(m, Dynamics::limit(), c, st(-2, 0), e, {});
  const Trajectory tr = integrate_limit(m, c.to_signal(m.box), 6.0, {}, st(-2, 0));
  double first = -1;
  for (int i = 0; i <= 600000; ++i) {
    const double t = 6.0 * i / 600000;
    if (e.contains(pack(tr.sample(t).state))) {
      first = t;
      break;
    }
  }
  ASSERT_GT(first, 0.0);
  EXPECT_NEAR(T, first, 2e-5);
}

TEST(Reach, UnreachableThrowsWithResidual) {
  const BangBangControl c{Vec::Constant(1, -1.0), {{}}, 3.0};
  try {
    reach_time_bisection(builtin_example1(), Dynamics::limit(), c, st(-1, 0), TargetSpec::point(st(-0.2, 0)), {});
    FAIL();
  } catch (const ReachabilityError& e) {
    EXPECT_GT(e.best_residual(), 0.0);
  }
}

TEST(Oracle, AlreadyInsideTarget) {
  const auto o = brute_force_oracle(builtin_example1(), Dynamics::limit(), st(-1, 0), TargetSpec::point(st(-1, 0)));
  EXPECT_EQ(o.best.T_opt, 0.0);
}

TEST(Oracle, RestToRestBound) {
  OracleOptions oo;
  oo.grid = 0.1;
  const auto o =
      brute_force_oracle(builtin_example1(), Dynamics::limit(), st(-2, 0), TargetSpec::point(st(-1, 0), 0.1), oo);
  // T = 2 is the exact optimum for the point; the 0.1-ball is entered earlier.
  EXPECT_LE(o.best.T_opt, 2.0);
  EXPECT_GE(o.best.T_opt, 1.8);
  EXPECT_EQ(o.best.control.initial[0], 1.0);
}

TEST(Optimal, RestToRest) {
  const SolveOutcome s = solve(st(-2, 0), st(-1, 0));
  EXPECT_NEAR(s.best.T_opt, 2.0, 2e-4);
  ASSERT_EQ(s.best.control.total_switches(), 1);
  EXPECT_NEAR(s.best.control.switch_times[0][0], 1.0, 2e-4);
  EXPECT_TRUE(verify_feasible(builtin_example1(), Dynamics::limit(), st(-2, 0), TargetSpec::point(st(-1, 0)), s.best));
}

TEST(Optimal, NoContactInstancesUseAtMostOneSwitch) {
  const std::vector<std::pair<SystemState, SystemState>> cases{
      {st(-3, 0), st(-1, 0)}, {st(-2, 0.5), st(-1, 0)}, {st(-1, -0.5), st(-2, 0.3)}};
  for (const auto& [a, b] : cases) {
    const SolveOutcome s = solve(a, b);
    EXPECT_LE(s.best.control.total_switches(), 1);
    EXPECT_TRUE(verify_feasible(builtin_example1(), Dynamics::limit(), a, TargetSpec::point(b), s.best));
  }
  EXPECT_NEAR(solve(st(-3, 0), st(-1, 0)).best.T_opt, 2 * std::sqrt(2.0), 2e-4);
}

TEST(Optimal, WallIsUsedAsBrake) {
  // u = +1 into the wall kills the velocity at t = sqrt(2) - 1; then -1, +1 arcs of length 0.5.
  const CanonicalModel m = builtin_example1();
  const SystemState a = st(-0.5, 1.0), b = st(-0.25, 0.0);
  const SolveOutcome s = solve(a, b);
  const double t_imp = std::sqrt(2.0) - 1;
  EXPECT_NEAR(s.best.T_opt, t_imp + 2 * std::sqrt(0.25), 5e-4);
  EXPECT_EQ(s.best.control.initial[0], 1.0);
  EXPECT_TRUE(verify_feasible(m, Dynamics::limit(), a, TargetSpec::point(b), s.best));

  const Trajectory tr = integrate_limit(m, s.best.control.to_signal(m.box), s.best.T_opt, {}, a);
  ASSERT_FALSE(tr.atoms.empty());
  EXPECT_NEAR(tr.atoms.front().time, t_imp, 1e-6);
  EXPECT_NEAR(tr.atoms.front().mass, std::sqrt(2.0), 1e-6);
  ASSERT_FALSE(tr.events.empty());
  const auto first_contact = std::find_if(tr.events.begin(), tr.events.end(), [](const auto& e) {
    return e.kind == EventKind::Impact || e.kind == EventKind::ContactEnter;
  });
  ASSERT_NE(first_contact, tr.events.end());
  EXPECT_EQ(first_contact->kind, EventKind::Impact);
  // The velocity jump lands on (0, 0); the trajectory then leaves the wall.
  const SystemState after = tr.sample(t_imp + 1e-9).state;
  EXPECT_NEAR(after.y, 0.0, 1e-8);
  EXPECT_NEAR(after.w, 0.0, 1e-6);
  for (double t = t_imp + 0.01; t <= s.best.T_opt; t += 0.01) EXPECT_LT(tr.sample(t).state.y, 0.0);
}

TEST(Optimal, PenaltyApproachesLimit) {
  // The gap shrinks like sqrt(log(gamma) / gamma): velocity decays like a Gaussian in the layer.
  const CanonicalModel m = builtin_example1();
  const SystemState a = st(-0.5, 1.0), b = st(-0.25, 0.0);
  const OptimalResult lim = solve(a, b).best;
  double prev = 1.0;
  for (double gamma : {1e4, 1e6}) {
    const OptimalResult pen = optimize_switching(m, Dynamics::penalty(gamma), a, TargetSpec::point(b), lim.control);
    const double gap = std::abs(pen.T_opt - lim.T_opt);
    EXPECT_LE(gap, 5 * std::sqrt(std::log(gamma) / gamma)) << gamma;
    EXPECT_LT(gap, prev);
    prev = gap;
  }
}

TEST(Optimal, Deterministic) {
  const SolveOutcome s1 = solve(st(-2, 0.5), st(-1, 0));
  const SolveOutcome s2 = solve(st(-2, 0.5), st(-1, 0));
  EXPECT_EQ(s1.best.T_opt, s2.best.T_opt);
  EXPECT_EQ(s1.best.control.switch_times, s2.best.control.switch_times);
}

TEST(Optimal, RefinementNeverWorse) {
  OracleOptions oo;
  oo.grid = 0.1;
  const auto m = builtin_example1();
  const auto o = brute_force_oracle(m, Dynamics::limit(), st(-2, 0), TargetSpec::point(st(-1, 0)), oo);
  for (const auto& [key, r] : o.per_structure) {
    const OptimalResult ref = optimize_switching(m, Dynamics::limit(), st(-2, 0), TargetSpec::point(st(-1, 0)), r.control);
    EXPECT_LE(ref.T_opt, r.T_opt + 1e-9);
  }
}

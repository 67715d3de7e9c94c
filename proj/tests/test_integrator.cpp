#include "backlash/integrator.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace backlash;

namespace {

SystemState ex1_state(double y, double w) { return {Vec(0), y, Vec(0), w}; }

ControlSignal constant(double u) { return ControlSignal(Vec::Constant(1, u)); }

// Classical RK4 on dy/dt = M - (gamma/2) y^2 with a fixed fine step.
double layer_ode_rk4(double M, double gamma, double tau, int steps) {
  auto f = [&](double y) { return M - 0.5 * gamma * y * y; };
  double y = 0.0;
  const double h = tau / steps;
  for (int i = 0; i < steps; ++i) {
    const double k1 = f(y), k2 = f(y + 0.5 * h * k1), k3 = f(y + 0.5 * h * k2), k4 = f(y + h * k3);
    y += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  return y;
}

void expect_nu_nondecreasing(const Trajectory& tr) {
  for (std::size_t i = 1; i < tr.size(); ++i) EXPECT_GE(tr.nu[i], tr.nu[i - 1]);
}

}  // namespace

TEST(Integrator, EquilibriumStaysPut) {
  const CanonicalModel m = builtin_example1();
  const Trajectory tr = integrate_penalty(m, 1e4, constant(0.0), 3.0, {}, ex1_state(-1, 0));
  for (std::size_t i = 0; i < tr.size(); ++i) {
    EXPECT_DOUBLE_EQ(tr.states[i].y, -1.0);
    EXPECT_DOUBLE_EQ(tr.states[i].w, 0.0);
    EXPECT_DOUBLE_EQ(tr.nu[i], 0.0);
  }
  EXPECT_DOUBLE_EQ(tr.t_final(), 3.0);
}

TEST(Integrator, FreeArcIsExactParabola) {
  const CanonicalModel m = builtin_example1();
  const Trajectory tr = integrate_penalty(m, 1e4, constant(1.0), 3.0, {}, ex1_state(-1, 0));
  bool saw_contact = false;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const double t = tr.times[i];
    if (t < std::sqrt(2.0)) {
      EXPECT_NEAR(tr.states[i].y, -1 + 0.5 * t * t, 1e-12);
      EXPECT_EQ(tr.nu[i], 0.0);
    } else {
      saw_contact = true;
    }
  }
  EXPECT_TRUE(saw_contact);
  const auto ycross = tr.event_times(EventKind::YCross);
  ASSERT_FALSE(ycross.empty());
  EXPECT_NEAR(ycross.front(), std::sqrt(2.0), 1e-10);
  expect_nu_nondecreasing(tr);
}

TEST(Integrator, MaxYScalesLikeInverseSqrtGamma) {
  const CanonicalModel m = builtin_example1();
  const double y4 = integrate_penalty(m, 1e4, constant(1.0), 1.0, {}, ex1_state(0, 1)).max_y();
  const double y6 = integrate_penalty(m, 1e6, constant(1.0), 1.0, {}, ex1_state(0, 1)).max_y();
  EXPECT_GT(y4, 0.0);
  EXPECT_NEAR(y4 / y6, 10.0, 1.0);
}

TEST(Integrator, ClosedFormLayer) {
  EXPECT_DOUBLE_EQ(boundary_layer_closed_form(1.0, 2.0, 0.0), 0.0);
  EXPECT_NEAR(boundary_layer_closed_form(1.0, 2.0, 50.0), 1.0, 1e-15);
  EXPECT_NEAR(boundary_layer_closed_form(1.0, 2.0, 1.0), 0.7615941559557649, 1e-15);
  EXPECT_NEAR(layer_ode_rk4(1.0, 2.0, 1.0, 2000), 0.7615941559557649, 1e-12);
  for (double M : {1.0, 10.0}) {
    for (double g : {1e2, 1e4, 1e6}) {
      const double tau = 3.0 / std::sqrt(M * g);
      const double ref = layer_ode_rk4(M, g, tau, 4000);
      EXPECT_NEAR(boundary_layer_closed_form(M, g, tau), ref, 1e-9 * ref);
    }
  }
  EXPECT_THROW(boundary_layer_closed_form(0.0, 1.0, 1.0), ArgumentError);
  EXPECT_DOUBLE_EQ(inelastic_decay_envelope(2.0, 5.0, 0.0), 2.0);
  EXPECT_LT(inelastic_decay_envelope(2.0, 5.0, 5.0), 1e-6);
}

TEST(Integrator, StepPenaltyForceArithmetic) {
  const CanonicalModel m = builtin_example1();
  const double dt = 1e-7;
  const PenaltyStep st = step_penalty(m, 100.0, ex1_state(0.1, 2.0), Vec::Constant(1, 0.0), dt);
  EXPECT_NEAR((st.state.w - 2.0) / dt, -20.0, 1e-4);
  EXPECT_NEAR(st.nu_increment / dt, 20.0, 1e-4);
  EXPECT_LE(st.error, 1.0);

  // y < 0 or w < 0: no penalty term at all.
  const PenaltyStep free = step_penalty(m, 100.0, ex1_state(-0.5, 0.2), Vec::Constant(1, 1.0), 0.1);
  EXPECT_NEAR(free.state.y, -0.5 + 0.02 + 0.005, 1e-14);
  EXPECT_EQ(free.nu_increment, 0.0);
  const PenaltyStep down = step_penalty(m, 100.0, ex1_state(0.5, -1.0), Vec::Constant(1, -1.0), 0.1);
  EXPECT_NEAR(down.state.w, -1.1, 1e-14);
  EXPECT_EQ(down.nu_increment, 0.0);

  SystemState bad = ex1_state(std::nan(""), 0);
  EXPECT_THROW(step_penalty(m, 100.0, bad, Vec::Constant(1, 0.0), 0.1), IntegrationError);
}

TEST(Integrator, LimitImpactAtom) {
  const CanonicalModel m = builtin_example1();
  const Trajectory tr = integrate_limit(m, constant(1.0), 2.0, {}, ex1_state(-0.5, 1.0));
  ASSERT_EQ(tr.atoms.size(), 1u);
  // -1/2 + t + t^2/2 = 0
  const double t_imp = -1.0 + std::sqrt(2.0);
  EXPECT_NEAR(tr.atoms[0].time, t_imp, 1e-10);
  EXPECT_NEAR(tr.atoms[0].mass, std::sqrt(2.0), 1e-9);
  // Contact persists with u = 1: nu grows at rate 1.
  EXPECT_NEAR(tr.nu.back(), std::sqrt(2.0) + (2.0 - t_imp), 1e-9);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    EXPECT_LE(tr.states[i].y, 1e-9);
    if (tr.times[i] >= tr.atoms[0].time) {
      EXPECT_EQ(tr.states[i].w, 0.0);
    }
  }
  expect_nu_nondecreasing(tr);
}

TEST(Integrator, LimitContactReleases) {
  const CanonicalModel m = builtin_example1();
  const ControlSignal u({1.0}, {Vec::Constant(1, 1.0), Vec::Constant(1, -1.0)});
  const Trajectory tr = integrate_limit(m, u, 2.0, {}, ex1_state(0.0, 0.0));
  EXPECT_TRUE(tr.atoms.empty());
  const auto exits = tr.event_times(EventKind::ContactExit);
  ASSERT_EQ(exits.size(), 1u);
  EXPECT_NEAR(exits[0], 1.0, 1e-12);
  EXPECT_NEAR(tr.states.back().y, -0.5, 1e-10);
  EXPECT_NEAR(tr.nu.back(), 1.0, 1e-12);
}

TEST(Integrator, LimitRejectsPositiveY) {
  EXPECT_THROW(integrate_limit(builtin_example1(), constant(1.0), 1.0, {}, ex1_state(0.5, 0)),
               ContractViolation);
}

TEST(Integrator, GronwallBoundUniformInGamma) {
  const CanonicalModel m = builtin_example1();
  double lo = INFINITY, hi = 0.0;
  for (double g : {1.0, 1e2, 1e4, 1e6, 1e8}) {
    const double s = integrate_penalty(m, g, constant(1.0), 3.5, {}, ex1_state(-4, 0)).sup_abs_state();
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  EXPECT_LT(hi / lo, 1.1);
}

TEST(Integrator, PenaltyApproachesLimitAtHalfRate) {
  const CanonicalModel m = builtin_example1();
  const Trajectory lim = integrate_limit(m, constant(1.0), 2.5, {}, ex1_state(-1, 0));
  std::vector<double> lg, le;
  for (double g : {1e2, 1e3, 1e4, 1e5, 1e6}) {
    const Trajectory tr = integrate_penalty(m, g, constant(1.0), 2.5, {}, ex1_state(-1, 0));
    double gap = 0.0;
    for (int k = 0; k <= 2000; ++k) {
      const double t = 2.5 * k / 2000;
      gap = std::max(gap, std::abs(tr.sample(t).state.y - lim.sample(t).state.y));
    }
    lg.push_back(std::log(g));
    le.push_back(std::log(gap));
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lg.size(); ++i) mx += lg[i], my += le[i];
  mx /= lg.size();
  my /= lg.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lg.size(); ++i) {
    sxy += (lg[i] - mx) * (le[i] - my);
    sxx += (lg[i] - mx) * (lg[i] - mx);
  }
  EXPECT_NEAR(sxy / sxx, -0.5, 0.05);
}

TEST(Integrator, StiffnessFailureCarriesTime) {
  const CanonicalModel m = builtin_example1();
  try {
    integrate_penalty(m, 1e34, constant(1.0), 3.0, {}, ex1_state(-1, 0));
    FAIL() << "expected a stiffness failure";
  } catch (const StiffnessFailure& e) {
    EXPECT_NEAR(e.time(), std::sqrt(2.0), 1e-6);
  }
}

TEST(Integrator, Example2PenaltyStaysBounded) {
  const CanonicalModel m = builtin_example2(1.0, 2.0, 1.0, 1.0);
  const SystemState s0{Vec::Constant(1, 0.0), -0.2, Vec::Constant(1, 0.0), 1.0};
  const Trajectory tr = integrate_penalty(m, 1e5, constant(1.0), 3.0, {}, s0);
  EXPECT_GT(tr.nu.back(), 0.0);
  EXPECT_LT(tr.max_y(), 0.05);
  expect_nu_nondecreasing(tr);
}

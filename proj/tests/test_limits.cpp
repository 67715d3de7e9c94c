#include "backlash/limits.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace backlash;

namespace {

SystemState ex1_state(double y, double w) { return {Vec(0), y, Vec(0), w}; }
ControlSignal constant(double u) { return ControlSignal(Vec::Constant(1, u)); }

const std::vector<double> kDecades{1e2, 1e3, 1e4, 1e5, 1e6};

const GammaSweep& ex1_impact_sweep() {
  static const GammaSweep sweep =
      gamma_sweep(builtin_example1(), constant(1.0), ex1_state(-0.5, 1.0), 1.5, kDecades);
  return sweep;
}

}  // namespace

TEST(Limits, ExactPowerLawFit) {
  std::vector<std::pair<double, double>> pairs;
  for (double g : kDecades) pairs.emplace_back(g, std::pow(g, -0.5));
  EXPECT_NEAR(fit_layer_exponent(pairs), -0.5, 1e-12);
}

TEST(Limits, NoisyPowerLawFit) {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> noise(-0.01, 0.01);
  std::vector<std::pair<double, double>> pairs;
  for (double g : kDecades) pairs.emplace_back(g, 3 * std::pow(g, -0.5) * (1 + noise(rng)));
  EXPECT_NEAR(fit_layer_exponent(pairs), -0.5, 0.02);
}

TEST(Limits, FitNeedsThreePositivePoints) {
  EXPECT_THROW(fit_layer_exponent({{1e2, 0.1}, {1e3, 0.0}, {1e4, 0.01}}), ArgumentError);
  EXPECT_THROW(fit_layer_exponent({{1e2, 0.1}, {1e3, 0.03}}), ArgumentError);
}

TEST(Limits, SweepArgumentChecks) {
  const CanonicalModel m = builtin_example1();
  EXPECT_THROW(gamma_sweep(m, constant(1), ex1_state(-1, 0), 1.0, {1e2, 1e3}), ArgumentError);
  EXPECT_THROW(gamma_sweep(m, constant(1), ex1_state(-1, 0), 1.0, {1e2, 1e4, 1e3}), ArgumentError);
}

TEST(Limits, NoContactSweepIsTriviallyCertified) {
  const GammaSweep s = gamma_sweep(builtin_example1(), constant(0.0), ex1_state(-1, 0), 2.0, kDecades);
  ASSERT_GE(s.grid.size(), 1000u);
  const ConvergenceReport r = certify_backlash(s);
  for (double g : r.uniform_xyv_gaps) EXPECT_EQ(g, 0.0);
  for (double g : r.nu_weakstar_gaps) EXPECT_EQ(g, 0.0);
  EXPECT_TRUE(r.certified);
  const CumulativeMeasure mu = extract_measure(s.trajectories.back());
  EXPECT_TRUE(mu.atoms.empty());
  for (double v : mu.cumulative) EXPECT_EQ(v, 0.0);
}

TEST(Limits, Example1ImpactSweepCertifies) {
  const GammaSweep& s = ex1_impact_sweep();
  const ConvergenceReport r = certify_backlash(s);
  for (std::size_t i = 1; i < r.sup_y_by_gamma.size(); ++i) {
    EXPECT_LT(r.sup_y_by_gamma[i].second, r.sup_y_by_gamma[i - 1].second);
  }
  ASSERT_TRUE(r.layer_exponent_valid);
  EXPECT_GE(r.layer_exponent, -0.6);
  EXPECT_LE(r.layer_exponent, -0.4);
  ASSERT_EQ(r.impact_times.size(), 1u);
  EXPECT_NEAR(r.impact_times[0], std::sqrt(2.0) - 1, 1e-9);
  EXPECT_TRUE(r.certified) << (r.failures.empty() ? "" : r.failures.front());
}

TEST(Limits, TruncatedSweepIsNotCertified) {
  const GammaSweep s =
      gamma_sweep(builtin_example1(), constant(1.0), ex1_state(-0.5, 1.0), 1.5, {1.0, 10.0, 100.0});
  EXPECT_FALSE(certify_backlash(s).certified);
}

TEST(Limits, CertificationMonotoneInThresholds) {
  const GammaSweep& s = ex1_impact_sweep();
  const ConvergenceReport base = certify_backlash(s);
  CertificationThresholds loose;
  loose.xyv = base.threshold_xyv * 3;
  loose.nu = base.threshold_nu * 3;
  loose.w = base.threshold_w * 3;
  loose.layer_slack = 0.5;
  const ConvergenceReport r = certify_backlash(s, loose);
  EXPECT_TRUE(!base.certified || r.certified);

  CertificationThresholds tight;
  tight.xyv = 1e-9;
  EXPECT_FALSE(certify_backlash(s, tight).certified);
}

TEST(Limits, AtomsFromLimitAndPenalty) {
  const CanonicalModel m = builtin_example1();
  const Trajectory lim = integrate_limit(m, constant(1.0), 1.5, {}, ex1_state(-0.5, 1.0));
  const CumulativeMeasure ml = extract_measure(lim);
  ASSERT_EQ(ml.atoms.size(), 1u);
  EXPECT_NEAR(ml.atoms[0].second, std::sqrt(2.0), 1e-9);

  const CumulativeMeasure mp = extract_measure(ex1_impact_sweep().trajectories.back());
  ASSERT_EQ(mp.atoms.size(), 1u);
  EXPECT_NEAR(mp.atoms[0].second, std::sqrt(2.0), 0.02 * std::sqrt(2.0));
  EXPECT_NEAR(mp.atoms[0].first, std::sqrt(2.0) - 1, 5 / std::sqrt(1e6));

  double total_atoms = 0.0;
  for (const auto& a : mp.atoms) total_atoms += a.second;
  EXPECT_LE(total_atoms, mp.cumulative.back() - mp.cumulative.front() + 1e-12);
  for (std::size_t i = 1; i < mp.cumulative.size(); ++i) EXPECT_GE(mp.cumulative[i], mp.cumulative[i - 1]);
}

TEST(Limits, WMatchesLimitOffImpactBand) {
  const GammaSweep& s = ex1_impact_sweep();
  const Trajectory lim = integrate_limit(builtin_example1(), constant(1.0), 1.5, {}, ex1_state(-0.5, 1.0));
  const double t_imp = std::sqrt(2.0) - 1;
  const double band = 10 / std::sqrt(s.gammas.back());
  const double th = 1e-2 * (1 + s.trajectories.back().sup_abs_w());
  double gap = 0.0;
  for (std::size_t j = 0; j < s.grid.size(); ++j) {
    if (std::abs(s.grid[j] - t_imp) <= band) continue;
    gap = std::max(gap, std::abs(s.resampled.back()[j].state.w - lim.sample(s.grid[j]).state.w));
  }
  EXPECT_LE(gap, th);
}

TEST(Limits, Example2SweepGapsDecrease) {
  const CanonicalModel m = builtin_example2(1.0, 2.0, 1.0, 1.0);
  const SystemState s0{Vec::Constant(1, 0.0), -0.2, Vec::Constant(1, 0.0), 1.0};
  const GammaSweep s = gamma_sweep(m, constant(1.0), s0, 1.0, kDecades);
  const ConvergenceReport r = certify_backlash(s);
  for (std::size_t i = 1; i < r.uniform_xyv_gaps.size(); ++i) {
    EXPECT_LT(r.uniform_xyv_gaps[i], r.uniform_xyv_gaps[i - 1]);
  }
  EXPECT_TRUE(r.certified) << (r.failures.empty() ? "" : r.failures.front());
}

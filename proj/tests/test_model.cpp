#include "backlash/model.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace backlash;

namespace {

SystemState state1(double x, double y, double v, double w) {
  return {Vec::Constant(1, x), y, Vec::Constant(1, v), w};
}

Vec u1(double u) { return Vec::Constant(1, u); }

}  // namespace

TEST(Model, Example1HasEmptyBlocks) {
  const CanonicalModel m = builtin_example1();
  EXPECT_EQ(m.n, 0);
  EXPECT_EQ(m.m, 1);
  const SystemState s{Vec(0), -1.0, Vec(0), 0.0};
  EXPECT_EQ(eval_f(m, s, u1(0.3)).size(), 0);
  EXPECT_DOUBLE_EQ(eval_g(m, s, u1(0.7)), 0.7);
  EXPECT_DOUBLE_EQ(eval_g(m, s, u1(1.0)), 1.0);
  EXPECT_DOUBLE_EQ(eval_g(m, s, u1(-1.0)), -1.0);
  EXPECT_DOUBLE_EQ(m.box.lo[0], -1.0);
  EXPECT_DOUBLE_EQ(m.box.hi[0], 1.0);
}

TEST(Model, Example2Coefficients) {
  auto c = example2_coefficients(1.0, 2.0, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(c.a, 1.0);
  EXPECT_DOUBLE_EQ(c.b, 2.0);
  EXPECT_DOUBLE_EQ(c.c, 0.5);
  c = example2_coefficients(1.0, 1.0, 1.0, 0.0);
  EXPECT_DOUBLE_EQ(c.a, 0.5);
  EXPECT_DOUBLE_EQ(c.b, 2.0);
  EXPECT_DOUBLE_EQ(c.c, 0.0);
  // b is linear in alpha
  EXPECT_NEAR(example2_coefficients(3.0, 1.0, 1e-6, 0.0).b * 2,
              example2_coefficients(3.0, 1.0, 2e-6, 0.0).b, 1e-20);
  EXPECT_THROW(example2_coefficients(0.0, 1.0, 1.0, 1.0), ArgumentError);
  EXPECT_THROW(example2_coefficients(1.0, -1.0, 1.0, 1.0), ArgumentError);
  EXPECT_THROW(example2_coefficients(1.0, 1.0, 1.0, -1.0), ArgumentError);
}

TEST(Model, Example2CoefficientIdentities) {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> d(0.1, 10.0);
  for (int i = 0; i < 100; ++i) {
    const double M = d(rng), k = d(rng), al = d(rng), be = d(rng);
    const auto c = example2_coefficients(M, k, al, be);
    EXPECT_NEAR(c.a * (M + 1), k, 1e-14 * k);
    EXPECT_NEAR(c.b * M, al * (M + 1), 1e-14 * al * (M + 1));
    EXPECT_NEAR(c.c * (M + 1), be, 1e-14 * be);
  }
}

TEST(Model, Example2Evaluation) {
  const CanonicalModel m = builtin_example2(1.0, 2.0, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(eval_f(m, state1(1, 0, 0, 0), u1(0))[0], -1.0);
  EXPECT_DOUBLE_EQ(eval_f(m, state1(0, 0, 1, 1), u1(1))[0], 1.0);
  EXPECT_DOUBLE_EQ(eval_g(m, state1(1, 0, 0, 0), u1(0)), 1.0);
  EXPECT_DOUBLE_EQ(eval_g(m, state1(0, 0, 0, 0), u1(0)), 0.0);
}

TEST(Model, DimensionMismatchThrows) {
  const CanonicalModel m = builtin_example2(1.0, 2.0, 1.0, 1.0);
  EXPECT_THROW(eval_f(m, state1(0, 0, 0, 0), Vec::Zero(2)), ContractViolation);
  EXPECT_THROW(eval_g(m, SystemState{Vec(0), 0.0, Vec(0), 0.0}, u1(0)), ContractViolation);
}

TEST(Model, AffineInWAndU) {
  const CanonicalModel m = builtin_example2(2.0, 3.0, 0.5, 0.7);
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  std::uniform_real_distribution<double> du(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    SystemState s = state1(d(rng), d(rng), d(rng), 0.0);
    const double w1 = d(rng), w2 = d(rng), a = du(rng), b = du(rng);
    SystemState s1 = s, s2 = s, sm = s;
    s1.w = w1;
    s2.w = w2;
    sm.w = 0.5 * (w1 + w2);
    const double lhs = eval_f(m, s1, u1(a))[0] + eval_f(m, s2, u1(b))[0];
    EXPECT_NEAR(lhs, 2 * eval_f(m, sm, u1(0.5 * (a + b)))[0], 1e-12);
    const double lg = eval_g(m, s1, u1(a)) + eval_g(m, s2, u1(b));
    EXPECT_NEAR(lg, 2 * eval_g(m, sm, u1(0.5 * (a + b))), 1e-12);
    EXPECT_TRUE(std::isfinite(lg));
  }
}

TEST(Model, GrowthBound) {
  std::mt19937 rng(3);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> du(-1.0, 1.0);
  std::vector<GrowthSample> cloud1, cloud2;
  for (int i = 0; i < 500; ++i) {
    cloud1.push_back({SystemState{Vec(0), 5 * nd(rng), Vec(0), 5 * nd(rng)}, u1(du(rng))});
    Eigen::Vector4d z(nd(rng), nd(rng), nd(rng), nd(rng));
    z /= z.norm();
    cloud2.push_back({state1(z[0], z[1], z[2], z[3]), u1(du(rng))});
  }
  EXPECT_TRUE(check_growth_bound(builtin_example1(), cloud1, 1.0).pass);

  // Oracle: direct enumeration of the ratio with the coefficients written out by hand.
  const CanonicalModel ex2 = builtin_example2(1.0, 2.0, 1.0, 1.0);
  double oracle = 0.0;
  for (const auto& [s, u] : cloud2) {
    const double x = s.x[0], y = s.y, v = s.v[0], w = s.w;
    const double f = -(x - y) - 0.5 * (v - w) + u[0];
    const double g = (x - y) + 0.5 * (v - w) - 2 * w + u[0];
    const double denom = 1 + std::abs(x) + std::abs(y) + std::abs(v) + std::abs(w);
    oracle = std::max({oracle, std::abs(f) / denom, std::abs(g) / denom});
  }
  const GrowthReport r = check_growth_bound(ex2, cloud2, 5.0);
  EXPECT_TRUE(r.pass);
  EXPECT_NEAR(r.max_ratio, oracle, 1e-14);

  CanonicalModel quad = builtin_example2(1.0, 2.0, 1.0, 1.0);
  quad.terms = [](const Vec& x, double, const Vec&) {
    AffineTerms t;
    t.f1 = Vec::Zero(1);
    t.f2 = Vec::Zero(1);
    t.f3 = Mat::Zero(1, 1);
    t.g1 = x[0] * x[0];
    t.g2 = 0.0;
    t.g3 = Vec::Zero(1);
    return t;
  };
  quad.jacobian = nullptr;
  std::vector<GrowthSample> far{{state1(10, 0, 0, 0), u1(0)}};
  EXPECT_FALSE(check_growth_bound(quad, far, 1.0).pass);
  EXPECT_THROW(check_growth_bound(ex2, std::span<const GrowthSample>{}, 1.0), ArgumentError);
}

TEST(Model, ExactJacobianMatchesFiniteDifferences) {
  const CanonicalModel m = builtin_example2(2.0, 3.0, 0.5, 0.7);
  const SystemState s = state1(0.3, -0.2, 0.1, 0.4);
  const ModelJacobian exact = model_jacobian(m, s, u1(0.5));
  const ModelJacobian fd = finite_difference_jacobian(m, s, u1(0.5));
  EXPECT_LT((exact.df - fd.df).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((exact.dg - fd.dg).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Model, ModelFromId) {
  EXPECT_EQ(model_from_id("ex1").n, 0);
  EXPECT_EQ(model_from_id("ex2").n, 1);
  EXPECT_THROW(model_from_id("ex3"), ArgumentError);
}

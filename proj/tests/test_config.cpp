#include "backlash/config.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace backlash;

namespace {

std::string message_of(const std::string& yaml) {
  try {
    parse_config(yaml);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, EmptyDocumentGivesDefaults) {
  EXPECT_EQ(parse_config(""), RunConfig{});
}

TEST(Config, ReadsEverySection) {
  const RunConfig c = parse_config(R"(
model: {id: ex2, params: {mass_M: 2, k: 3, alpha: 0.5, beta: 0.25}}
scenario:
  init: [0, -1, 0, 0]
  control: "bang:1/0.5"
  t_final: 2.5
  target: {kind: point, center: [0, -0.5, 0, 0], delta: 0.01}
gamma: 1000
gammas: [100, 1000, 10000]
stabilize: {equilibrium: [-1, -1, 0, 0], u0: [0], margin: 0.2, epsilon_cap: 0.5}
optimize: {grid: 0.1, max_switches: 2, oracle_delta: 0.05}
verify: {trajectory: t.csv, adjoint: a.json}
integrator: {rel_tol: 1e-9, abs_tol: 1e-11, dt_max: 0.05, contact_band: 1e-10, gamma_step_cap: 0.2}
output: {dir: results}
seed: 7
)");
  EXPECT_EQ(c.model, "ex2");
  EXPECT_EQ(c.params.k, 3.0);
  EXPECT_EQ(c.init, (std::vector<double>{0, -1, 0, 0}));
  EXPECT_EQ(c.control, "bang:1/0.5");
  ASSERT_TRUE(c.gamma);
  EXPECT_EQ(*c.gamma, 1000.0);
  ASSERT_TRUE(c.target);
  EXPECT_EQ(c.target->delta, 0.01);
  EXPECT_EQ(c.max_switches, 2);
  ASSERT_TRUE(c.oracle_delta);
  EXPECT_EQ(c.integrator.dt_max, 0.05);
  EXPECT_EQ(c.output_dir, "results");
  EXPECT_EQ(c.seed, 7u);
}

TEST(Config, GammaLimitKeyword) {
  EXPECT_FALSE(parse_config("gamma: limit").gamma.has_value());
}

TEST(Config, UnknownKeysAreNamed) {
  EXPECT_NE(message_of("model: {foo: 1}").find("model.foo"), std::string::npos);
  EXPECT_NE(message_of("bogus: 1").find("bogus"), std::string::npos);
  EXPECT_NE(message_of("scenario: {target: {radius: 1}}").find("scenario.target.radius"), std::string::npos);
}

TEST(Config, BadValuesAreNamed) {
  EXPECT_NE(message_of("scenario: {t_final: abc}").find("scenario.t_final"), std::string::npos);
  EXPECT_NE(message_of("scenario: {target: {kind: cube}}").find("scenario.target.kind"), std::string::npos);
}

TEST(Config, RoundTripOfRandomConfigs) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(-10, 10);
  for (int k = 0; k < 50; ++k) {
    RunConfig c;
    c.model = k % 2 ? "ex1" : "ex2";
    c.params.mass_M = std::abs(U(rng)) + 0.1;
    c.init = {U(rng), U(rng), U(rng), U(rng)};
    c.control = "const:" + std::to_string(k % 3 - 1);
    c.t_final = std::abs(U(rng));
    if (k % 3) c.gamma = std::exp(U(rng));
    c.gammas = {1e2, 1e3 + U(rng), 1e4};
    if (k % 4 == 0) {
      TargetConfig t;
      t.kind = "ellipsoid";
      t.center = {U(rng), U(rng)};
      t.V = {1, U(rng), U(rng), 2};
      t.epsilon = std::abs(U(rng)) / 3;
      c.target = t;
    }
    if (k % 5 == 0) c.oracle_delta = 0.1 * std::abs(U(rng));
    c.integrator.rel_tol = 1e-9 * (1 + std::abs(U(rng)));
    c.output_dir = "out" + std::to_string(k);
    c.seed = rng();
    EXPECT_EQ(parse_config(to_yaml(c)), c) << to_yaml(c);
  }
}

TEST(Config, StateAssignments) {
  EXPECT_EQ(parse_state_assignments("y=-1,w=0.5", 0), (std::vector<double>{-1, 0.5}));
  EXPECT_EQ(parse_state_assignments("x=2, v=3", 1), (std::vector<double>{2, 0, 3, 0}));
  EXPECT_EQ(parse_state_assignments("x2=1", 2), (std::vector<double>{0, 1, 0, 0, 0, 0}));
  EXPECT_THROW(parse_state_assignments("x=1", 0), ConfigError);
  EXPECT_THROW(parse_state_assignments("y=abc", 0), ConfigError);
  EXPECT_THROW(parse_state_assignments("y", 0), ConfigError);
}

TEST(Config, ControlSpecs) {
  const ControlBox box{Vec::Constant(1, -1), Vec::Constant(1, 1)};
  EXPECT_EQ(parse_control("const:0.5", box).value(3.0)[0], 0.5);
  const ControlSignal b = parse_control("bang:1/0.5,1.5", box);
  EXPECT_EQ(b.value(0.2)[0], 1.0);
  EXPECT_EQ(b.value(1.0)[0], -1.0);
  EXPECT_EQ(b.value(2.0)[0], 1.0);
  EXPECT_THROW(parse_control("const:2", box), ConfigError);
  EXPECT_THROW(parse_control("sine:1", box), ConfigError);
  EXPECT_THROW(parse_control("bang:0.3/1", box), ConfigError);
}

TEST(Config, ModelAndTargetBuilders) {
  RunConfig c;
  c.model = "ex3";
  EXPECT_THROW(build_model(c), ConfigError);
  c.model = "ex2";
  EXPECT_EQ(build_model(c).n, 1);
  TargetConfig t;
  t.center = {-1, 0};
  EXPECT_THROW(build_target(t, 1), ConfigError);
  EXPECT_EQ(build_target(t, 0).kind, TargetKind::Point);
  t.center = {0.5, 0};
  EXPECT_THROW(build_target(t, 0), ConfigError);
  t.center = {-1, 0};
  t.kind = "ellipsoid";
  t.V = {1, 0, 0, 1};
  t.epsilon = 0.1;
  EXPECT_EQ(build_target(t, 0).kind, TargetKind::Ellipsoid);
}

#include "backlash/commands.hpp"
#include "backlash/io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace backlash;

namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;

  std::vector<std::string> files() const {
    std::vector<std::string> v;
    std::istringstream in(out);
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("OUT ", 0) == 0) v.push_back(line.substr(4));
    }
    return v;
  }
};

Outcome run(int (*cmd)(const RunConfig&, std::ostream&, std::ostream&), const RunConfig& cfg) {
  std::ostringstream out, err;
  Outcome r;
  r.code = cmd(cfg, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "backlash_test_cmd" / name;
  fs::remove_all(p);
  return p.string();
}

RunConfig ex1(double y, double w) {
  RunConfig c;
  c.model = "ex1";
  c.init = {y, w};
  return c;
}

}  // namespace

TEST(Simulate, ImpactIsVisibleInCsv) {
  RunConfig c = ex1(-1, 0);
  c.gamma = 1e4;
  c.control = "const:1";
  c.t_final = 3;
  c.output_dir = dir("sim");
  const Outcome r = run(cmd_simulate, c);
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(r.files().size(), 3u);
  for (const auto& f : r.files()) EXPECT_TRUE(fs::exists(f)) << f;
  const Trajectory tr = read_trajectory_csv(r.files()[0], builtin_example1(), 1e4);
  EXPECT_GT(tr.nu.back(), 1.0);
  EXPECT_GT(tr.max_y(), 0.0);
}

TEST(Simulate, RestStaysConstant) {
  RunConfig c = ex1(-1, 0);
  c.output_dir = dir("rest");
  const Outcome r = run(cmd_simulate, c);
  ASSERT_EQ(r.code, 0) << r.err;
  const Trajectory tr = read_trajectory_csv(r.files()[0], builtin_example1(), std::nullopt);
  for (const auto& s : tr.states) {
    EXPECT_EQ(s.y, -1.0);
    EXPECT_EQ(s.w, 0.0);
  }
}

TEST(Simulate, UsageErrors) {
  RunConfig c = ex1(-1, 0);
  c.output_dir = dir("bad");
  c.gamma = -5;
  Outcome r = run(cmd_simulate, c);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("gamma must be positive"), std::string::npos);
  c.gamma.reset();
  c.init = {1, 2, 3};
  r = run(cmd_simulate, c);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("scenario.init"), std::string::npos);
  c.init = {-1, 0};
  c.control = "const:5";
  r = run(cmd_simulate, c);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("scenario.control"), std::string::npos);
}

TEST(Simulate, RuntimeFailureHasJsonBody) {
  RunConfig c = ex1(-1, 0);
  c.output_dir = dir("stiff");
  c.gamma = 1e4;
  c.control = "const:1";
  c.t_final = 3;
  c.integrator.gamma_step_cap = 1e-20;
  const Outcome r = run(cmd_simulate, c);
  EXPECT_EQ(r.code, 2);
  const Json j = Json::parse(r.err);
  EXPECT_EQ(j["schema"], kSchema);
  EXPECT_TRUE(j["error"].contains("message"));
}

TEST(Sweep, NeedsThreeGammas) {
  RunConfig c = ex1(-1, 0);
  c.gammas = {1e2, 1e3};
  const Outcome r = run(cmd_sweep, c);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("at least 3 gammas required"), std::string::npos);
}

TEST(Sweep, ImpactSweepCertifies) {
  RunConfig c = ex1(-0.5, 1.0);
  c.control = "const:1";
  c.t_final = 1.5;
  c.gammas = {1e2, 1e3, 1e4, 1e5, 1e6};
  c.output_dir = dir("sweep");
  const Outcome r = run(cmd_sweep, c);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.files().size(), 8u);
  const Json j = read_json(r.files()[6]);
  EXPECT_TRUE(j["report"]["certified"].get<bool>());
  const double e = j["report"]["layer_exponent"].get<double>();
  EXPECT_NEAR(e, -0.5, 0.1);
}

TEST(Sweep, NoContactIsCertified) {
  RunConfig c = ex1(-1, 0);
  c.gammas = {1e2, 1e3, 1e4};
  c.output_dir = dir("sweep0");
  EXPECT_EQ(run(cmd_sweep, c).code, 0);
}

class OptimizeVerify : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    RunConfig c = ex1(-2, 0);
    TargetConfig t;
    t.center = {-1, 0};
    c.target = t;
    c.grid = 0.1;
    c.oracle_delta = 0.1;
    c.output_dir = dir("opt");
    opt_ = new Outcome(run(cmd_optimize, c));
  }
  static void TearDownTestSuite() { delete opt_; }

  static std::string file(const std::string& name) {
    for (const auto& f : opt_->files()) {
      if (fs::path(f).filename() == name) return f;
    }
    return "";
  }

  static RunConfig verify_config(const std::string& adjoint) {
    RunConfig c;
    c.model = "ex1";
    c.trajectory_file = file("trajectory.csv");
    c.adjoint_file = adjoint;
    c.output_dir = dir("verify");
    return c;
  }

  static Outcome* opt_;
};

Outcome* OptimizeVerify::opt_ = nullptr;

TEST_F(OptimizeVerify, RestToRestTakesTwo) {
  ASSERT_EQ(opt_->code, 0) << opt_->err;
  const Json j = read_json(file("optimize.json"));
  EXPECT_NEAR(j["result"]["T_opt"].get<double>(), 2.0, 0.01);
  EXPECT_EQ(j["sign_pattern"], Json::parse("[1, -1]"));
  EXPECT_TRUE(j["pmp"]["pass"].get<bool>());
  EXPECT_FALSE(file("phase.svg").empty());
}

TEST_F(OptimizeVerify, VerifyPassesOnOptimizerOutput) {
  for (const char* adj : {"adjoint_terminal.json", "adjoint.csv"}) {
    const Outcome r = run(cmd_verify, verify_config(file(adj)));
    EXPECT_EQ(r.code, 0) << adj << ": " << r.err;
    EXPECT_EQ(r.files().size(), 2u);
  }
}

TEST_F(OptimizeVerify, VerifyFromTarget) {
  RunConfig c = verify_config("");
  TargetConfig t;
  t.center = {-1, 0};
  c.target = t;
  EXPECT_EQ(run(cmd_verify, c).code, 0);
}

TEST_F(OptimizeVerify, CorruptedAdjointNamesResidual) {
  std::ifstream in(file("adjoint.csv"));
  const std::string bad = fs::path(file("adjoint.csv")).replace_filename("bad_adjoint.csv").string();
  std::ofstream outf(bad);
  std::string line;
  std::getline(in, line);
  outf << line << '\n';
  std::size_t r_col = 0;
  {
    std::stringstream hs(line);
    std::string name;
    for (std::size_t k = 0; std::getline(hs, name, ','); ++k) {
      if (name == "r") r_col = k;
    }
  }
  ASSERT_GT(r_col, 0u);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    cells[r_col] = format_double(std::stod(cells[r_col]) * 1.01);
    for (std::size_t k = 0; k < cells.size(); ++k) outf << (k ? "," : "") << cells[k];
    outf << '\n';
  }
  outf.close();
  const Outcome r = run(cmd_verify, verify_config(bad));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("residual_r"), std::string::npos) << r.err;
}

TEST_F(OptimizeVerify, MissingFilesAreUsageErrors) {
  EXPECT_EQ(run(cmd_verify, verify_config("/nonexistent.json")).code, 1);
  RunConfig c = verify_config("");
  c.trajectory_file = "/nonexistent.csv";
  EXPECT_EQ(run(cmd_verify, c).code, 1);
}

TEST(Optimize, MissingTargetIsUsageError) {
  const Outcome r = run(cmd_optimize, ex1(-2, 0));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("scenario.target"), std::string::npos);
}

TEST(Stabilize, Example2Neighborhood) {
  RunConfig c;
  c.model = "ex2";
  c.equilibrium = {-1, -1, 0, 0};
  c.output_dir = dir("stab");
  const Outcome r = run(cmd_stabilize, c);
  ASSERT_EQ(r.code, 0) << r.err;
  const Json j = read_json(r.files().back());
  EXPECT_GT(j["neighborhood"]["epsilon"].get<double>(), 0.0);
  EXPECT_GT(j["neighborhood"]["rho"].get<double>(), 0.0);
  EXPECT_TRUE(j["sampled_checks"]["pass"].get<bool>());
}

TEST(Stabilize, NonEquilibriumIsRuntimeError) {
  RunConfig c;
  c.model = "ex2";
  c.equilibrium = {0, -1, 0, 0};
  c.output_dir = dir("stab_bad");
  const Outcome r = run(cmd_stabilize, c);
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(Json::parse(r.err)["error"]["type"], "not_equilibrium");
}

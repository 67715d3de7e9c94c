#include "backlash/io.hpp"
#include "backlash/svg.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace backlash;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "backlash_test_io";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

SystemState st(double y, double w) { return {Vec(0), y, Vec(0), w}; }

void expect_same(const Trajectory& a, const Trajectory& b) {
  ASSERT_EQ(a.size(), b.size());
  ASSERT_EQ(a.atoms.size(), b.atoms.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.times[i], b.times[i]);
    EXPECT_EQ(pack(a.states[i]), pack(b.states[i]));
    EXPECT_EQ(a.controls[i], b.controls[i]);
    EXPECT_EQ(a.nu[i], b.nu[i]);
  }
  for (std::size_t i = 0; i + 1 < a.size(); ++i) EXPECT_EQ(a.interval_modes[i], b.interval_modes[i]) << i;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_LE((a.rate_left[i] - b.rate_left[i]).lpNorm<Eigen::Infinity>(), 1e-12) << i;
    EXPECT_LE((a.rate_right[i] - b.rate_right[i]).lpNorm<Eigen::Infinity>(), 1e-12) << i;
  }
  for (std::size_t k = 0; k < a.atoms.size(); ++k) {
    EXPECT_EQ(a.atoms[k].time, b.atoms[k].time);
    EXPECT_NEAR(a.atoms[k].mass, b.atoms[k].mass, 1e-15);
  }
}

}  // namespace

TEST(Io, FormatDoubleRoundTrips) {
  for (double x : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23}) EXPECT_EQ(std::stod(format_double(x)), x);
}

TEST(Io, LimitTrajectoryCsvRoundTrip) {
  const CanonicalModel m = builtin_example1();
  const Trajectory tr = integrate_limit(m, ControlSignal(Vec::Constant(1, 1.0)), 3.0, {}, st(-1, 0));
  ASSERT_EQ(tr.atoms.size(), 1u);
  const std::string p = temp_path("limit.csv");
  write_trajectory_csv(p, tr);
  expect_same(tr, read_trajectory_csv(p, m, std::nullopt));
}

TEST(Io, PenaltyTrajectoryCsvRoundTrip) {
  const CanonicalModel m = builtin_example2(1, 2, 1, 1);
  const SystemState s0{Vec::Constant(1, 0.0), -0.2, Vec::Constant(1, 0.0), 1.0};
  const Trajectory tr = integrate_penalty(m, 1e4, ControlSignal({0.5}, {Vec::Constant(1, 1.0), Vec::Constant(1, -1.0)}),
                                          1.0, {}, s0);
  const std::string p = temp_path("penalty.csv");
  write_trajectory_csv(p, tr);
  expect_same(tr, read_trajectory_csv(p, m, 1e4));
}

TEST(Io, CsvHeaderOrder) {
  const CanonicalModel m = builtin_example2(1, 2, 1, 1);
  const SystemState s0{Vec::Constant(1, 0.0), -1, Vec::Constant(1, 0.0), 0};
  const std::string p = temp_path("header.csv");
  write_trajectory_csv(p, integrate_limit(m, ControlSignal(Vec::Constant(1, 0.0)), 0.1, {}, s0));
  std::ifstream f(p);
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header, "t,x_1,y,v_1,w,u_1,nu");
}

TEST(Io, MalformedCsvIsRejected) {
  const CanonicalModel m = builtin_example1();
  const std::string p = temp_path("bad.csv");
  std::ofstream(p) << "t,y,w,u_1,nu\n0,-1,0,1\n";
  EXPECT_THROW(read_trajectory_csv(p, m, std::nullopt), ArgumentError);
  std::ofstream(p) << "t,y,w,u_1,nu\n0,-1,0,1,0\n0.1,-1,x,1,0\n";
  EXPECT_THROW(read_trajectory_csv(p, m, std::nullopt), ArgumentError);
  std::ofstream(p) << "t,y,w,u_1,nu\n0.2,-1,0,1,0\n0.1,-1,0,1,0\n0.3,-1,0,1,0\n";
  EXPECT_THROW(read_trajectory_csv(p, m, std::nullopt), ArgumentError);
  EXPECT_THROW(read_trajectory_csv(temp_path("missing.csv"), m, std::nullopt), ArgumentError);
}

TEST(Io, AdjointCsvRoundTrip) {
  const CanonicalModel m = builtin_example1();
  const Trajectory tr = integrate_limit(m, ControlSignal(Vec::Constant(1, 1.0)), 2.0, {}, st(-1, 0));
  const AdjointTrajectory adj = integrate_adjoint_limit(m, tr, {Vec(0), 0.3, Vec(0), -0.7});
  const std::string p = temp_path("adjoint.csv");
  write_adjoint_csv(p, adj);
  const AdjointTrajectory back = read_adjoint_csv(p, m, tr);
  ASSERT_EQ(back.size(), adj.size());
  for (std::size_t i = 0; i < adj.size(); ++i) {
    EXPECT_EQ(pack(back.limit_state(i)), pack(adj.limit_state(i)));
    EXPECT_EQ(back.sigma_left[i], adj.sigma_left[i]);
    EXPECT_EQ(back.mu_cumulative[i], adj.mu_cumulative[i]);
  }
}

TEST(Io, JsonCarriesSchemaFirst) {
  const std::string p = temp_path("x.json");
  write_json(p, Json{{"a", 1}, {"schema", "other"}});
  const Json j = read_json(p);
  EXPECT_EQ(j.begin().key(), "schema");
  EXPECT_EQ(j["schema"], kSchema);
  EXPECT_EQ(j["a"], 1);
}

TEST(Io, AdjointStateJson) {
  const AdjointState a{Vec::Constant(1, 1.5), -2, Vec::Constant(1, 3), 4};
  const AdjointState b = adjoint_state_from_json(to_json(a), 1);
  EXPECT_EQ(pack(a), pack(b));
  EXPECT_THROW(adjoint_state_from_json(to_json(a), 2), ArgumentError);
  EXPECT_THROW(adjoint_state_from_json(Json{{"q", Json::array()}}, 0), ArgumentError);
}

TEST(Svg, RendersSeriesAndEscapes) {
  const std::string s = render_svg({{"a<b", {0, 1, 2}, {1, 4, 9}}, {"pts", {1}, {2}, true}},
                                   {"t & u", "x", "y", false, false, false});
  EXPECT_NE(s.find("<svg"), std::string::npos);
  EXPECT_NE(s.find("<polyline"), std::string::npos);
  EXPECT_NE(s.find("<circle"), std::string::npos);
  EXPECT_NE(s.find("a&lt;b"), std::string::npos);
  EXPECT_NE(s.find("t &amp; u"), std::string::npos);
  EXPECT_THROW(render_svg({{"bad", {0, 1}, {1}}}, {}), ArgumentError);
}

TEST(Svg, LogAxesSkipNonPositive) {
  const std::string s = render_svg({{"d", {1e2, 1e4, 0}, {1e-1, 1e-2, 5}}}, {"", "", "", true, true, true});
  std::size_t circles = 0;
  for (std::size_t p = s.find("<circle"); p != std::string::npos; p = s.find("<circle", p + 1)) ++circles;
  EXPECT_EQ(circles, 2u);
}

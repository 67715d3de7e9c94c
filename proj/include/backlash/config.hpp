#pragma once

#include "backlash/optimal.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace backlash {

/// Malformed or inconsistent configuration; the message names the offending key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ModelParams {
  double mass_M = 1.0;
  double k = 2.0;
  double alpha = 1.0;
  double beta = 1.0;

  bool operator==(const ModelParams&) const = default;
};

struct TargetConfig {
  /// "point" or "ellipsoid".
  std::string kind = "point";
  std::vector<double> center;  // packed (x, y, v, w)
  double delta = 1e-4;
  std::vector<double> V;       // row-major
  double epsilon = 0.0;

  bool operator==(const TargetConfig&) const = default;
};

struct RunConfig {
  std::string model = "ex1";
  ModelParams params;

  std::vector<double> init;  // packed (x, y, v, w)
  /// "const:u1,...,um" or "bang:u0/t1,t2,..." (single channel).
  std::string control = "const:0";
  double t_final = 1.0;
  /// Empty: limit dynamics.
  std::optional<double> gamma;
  std::vector<double> gammas;
  std::optional<TargetConfig> target;

  std::vector<double> equilibrium;
  std::vector<double> u0;
  double margin = 0.1;
  double epsilon_cap = 1.0;

  double grid = 0.05;
  int max_switches = 3;
  std::optional<double> oracle_delta;

  std::string trajectory_file;
  std::string adjoint_file;

  IntegratorConfig integrator;
  std::string output_dir = "out";
  std::uint64_t seed = 1;

  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& yaml_text);
RunConfig load_config(const std::string& path);
/// YAML with 17 significant digits; parse_config(to_yaml(c)) == c.
std::string to_yaml(const RunConfig& cfg);

CanonicalModel build_model(const RunConfig& cfg);

/// "y=-1,w=0" style assignment list; keys x, v (n = 1) or x1..xn, v1..vn, and y, w.
/// Missing entries are zero.
std::vector<double> parse_state_assignments(const std::string& text, int n);

ControlSignal parse_control(const std::string& spec, const ControlBox& box);
/// bang:u0/t1,... as a BangBangControl with the given horizon.
BangBangControl parse_bang_bang(const std::string& spec, double horizon);

TargetSpec build_target(const TargetConfig& tc, int n);

}  // namespace backlash

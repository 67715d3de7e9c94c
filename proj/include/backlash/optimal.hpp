#pragma once

#include "backlash/integrator.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace backlash {

enum class TargetKind { Point, Ellipsoid };

/// Terminal set: a delta-ball around a point, or {z : <z - c, V (z - c)> <= epsilon}.
struct TargetSpec {
  TargetKind kind = TargetKind::Point;
  Vec center;  // packed (x, y, v, w)
  double delta = 1e-4;
  Mat V;
  double epsilon = 0.0;

  static TargetSpec point(const SystemState& s, double delta = 1e-4);
  static TargetSpec ellipsoid(Vec center, Mat V, double epsilon);

  void validate(int n) const;
  /// Negative inside the target, zero on its boundary.
  double value(const Vec& z) const;
  /// Distance-like residual: |z - c| for points, sqrt(<dz, V dz>) for ellipsoids.
  double residual(const Vec& z) const;
  /// Residual allowed at the terminal time.
  double residual_tolerance() const;
  bool contains(const Vec& z) const { return value(z) <= 0.0; }
};

struct OptimalResult {
  BangBangControl control;
  double T_opt = 0.0;
  SystemState terminal_state;
  double terminal_residual = 0.0;
  std::vector<std::string> solver_trace;
};

struct ReachResult {
  bool hit = false;
  double T = 0.0;
  SystemState terminal_state;
  /// Smallest residual(z) - residual_tolerance() seen along the run (<= 0 when hit).
  double closest = 0.0;
};

/// First time in [0, T_max] at which the trajectory enters the target, located to
/// 1e-8 by bisection with exact re-integration.
ReachResult first_hit(const CanonicalModel& model, const Dynamics& dyn, const ControlSignal& control,
                      const SystemState& init, const TargetSpec& target, double T_max,
                      const IntegratorConfig& cfg = {});

/// Horizon bound 10 (1 + |init - target center|).
double default_horizon(const SystemState& init, const TargetSpec& target);

/// First hit time for a fixed switching shape, searched up to shape.horizon.
double reach_time_bisection(const CanonicalModel& model, const Dynamics& dyn,
                            const BangBangControl& shape, const SystemState& init,
                            const TargetSpec& target, const IntegratorConfig& cfg = {});

struct OracleOptions {
  int max_switches = 3;
  double grid = 0.05;
  std::optional<double> T_max;
};

/// Key (initial value, number of switches) of a switching structure.
using StructureKey = std::pair<double, int>;

struct OracleOutcome {
  OptimalResult best;
  std::map<StructureKey, OptimalResult> per_structure;
};

/// Exhaustive search over the initial value and grid-aligned switch times (m = 1).
/// Ties go to fewer switches, then to lexicographically earlier switch times.
OracleOutcome brute_force_oracle(const CanonicalModel& model, const Dynamics& dyn,
                                 const SystemState& init, const TargetSpec& target,
                                 const OracleOptions& opts = {}, const IntegratorConfig& cfg = {});

struct RefineOptions {
  std::optional<double> T_max;
  double bracket = 0.05;
  int max_sweeps = 200;
};

/// Coordinate descent with golden-section line searches on the arc durations and
/// on the absolute switch times. Never returns a worse T than the initial guess.
OptimalResult optimize_switching(const CanonicalModel& model, const Dynamics& dyn,
                                 const SystemState& init, const TargetSpec& target,
                                 const BangBangControl& init_guess, const RefineOptions& opts = {},
                                 const IntegratorConfig& cfg = {});

struct SolveOptions {
  OracleOptions oracle;
  /// Target used for the grid search; defaults to the real target.
  std::optional<TargetSpec> oracle_target;
  RefineOptions refine;
  /// Solutions whose T differ by less than this are ranked by switch count.
  double tie_tolerance = 1e-6;
};

struct SolveOutcome {
  OptimalResult best;
  std::map<StructureKey, OptimalResult> per_structure;
};

/// Oracle on the grid, refinement of the best candidate of every structure, and
/// selection of the fastest refined solution.
SolveOutcome solve_time_optimal(const CanonicalModel& model, const Dynamics& dyn,
                                const SystemState& init, const TargetSpec& target,
                                const SolveOptions& opts = {}, const IntegratorConfig& cfg = {});

/// Re-integrates the result with rel_tol / 10 and checks target membership.
bool verify_feasible(const CanonicalModel& model, const Dynamics& dyn, const SystemState& init,
                     const TargetSpec& target, const OptimalResult& result,
                     const IntegratorConfig& cfg = {});

}  // namespace backlash

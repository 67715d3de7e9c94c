#pragma once

#include "backlash/integrator.hpp"

#include <string>
#include <utility>
#include <vector>

namespace backlash {

/// Penalty trajectories for increasing gamma, all resampled on one uniform grid.
struct GammaSweep {
  std::vector<double> gammas;
  std::vector<Trajectory> trajectories;
  std::vector<double> grid;
  /// resampled[k][j] = trajectory k at grid[j]
  std::vector<std::vector<Trajectory::Sample>> resampled;
  SystemState init;
  double t_final = 0.0;
};

/// Integrates every gamma concurrently; failures are rethrown tagged with gamma.
GammaSweep gamma_sweep(const CanonicalModel& model, const ControlSignal& control,
                       const SystemState& init, double t_final, std::vector<double> gammas,
                       const IntegratorConfig& cfg = {}, int grid_points = 2001);

/// Least-squares slope of log(max_y) against log(gamma). Pairs with max_y <= 0 are skipped.
double fit_layer_exponent(const std::vector<std::pair<double, double>>& sup_y_by_gamma);

struct CumulativeMeasure {
  std::vector<double> grid;
  std::vector<double> cumulative;
  std::vector<std::pair<double, double>> atoms;  // (time, mass)
};

/// Width of the window used to detect atoms in a penalty run, 5/sqrt(gamma).
double atom_window(double gamma);

/// Largest increment of nu over any window of width atom_window(gamma)
/// (largest atom for limit runs).
double max_jump(const Trajectory& traj);

CumulativeMeasure extract_measure(const Trajectory& traj, double atom_threshold);
/// extract_measure with atom_threshold = 0.1 * max_jump(traj).
CumulativeMeasure extract_measure(const Trajectory& traj);

/// Unset fields take their data-dependent defaults:
///   xyv = 1e-3 (1 + sup|state|), nu = 1e-2 total nu, w = 1e-2 (1 + sup|w|).
struct CertificationThresholds {
  std::optional<double> xyv;
  std::optional<double> nu;
  std::optional<double> w;
  /// Allowed growth of the layer constant at the largest gamma.
  double layer_slack = 0.1;
  /// Impact bands have half-width band_factor / sqrt(gamma).
  double band_factor = 10.0;
};

struct ConvergenceReport {
  std::vector<std::pair<double, double>> sup_y_by_gamma;
  double layer_exponent = 0.0;
  bool layer_exponent_valid = false;
  double layer_C = 0.0;
  std::vector<double> uniform_xyv_gaps;
  std::vector<double> w_pointwise_gaps;
  std::vector<double> nu_weakstar_gaps;
  /// Estimated sup distance of the last member from the limit: g_K rho / (1 - rho),
  /// rho = g_K / g_{K-1}.
  double xyv_tail_estimate = 0.0;
  std::vector<double> impact_times;
  /// w of the largest-gamma run at band_factor / sqrt(gamma) after each impact.
  std::vector<double> post_impact_w;
  double threshold_xyv = 0.0;
  double threshold_nu = 0.0;
  double threshold_w = 0.0;
  double band_factor = 10.0;
  bool xyv_ok = false;
  bool nu_ok = false;
  bool layer_ok = false;
  bool shock_ok = false;
  bool certified = false;
  std::vector<std::string> failures;
};

ConvergenceReport certify_backlash(const GammaSweep& sweep, const CertificationThresholds& th = {});

}  // namespace backlash

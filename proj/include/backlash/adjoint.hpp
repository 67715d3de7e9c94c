#pragma once

#include "backlash/optimal.hpp"

#include <complex>
#include <optional>
#include <string>
#include <vector>

namespace backlash {

/// Multipliers (q, sigma, p, r). In the approximating (penalty) form the second
/// entry is the multiplier s of the y equation.
struct AdjointState {
  Vec q;
  double sigma = 0.0;
  Vec p;
  double r = 0.0;

  bool finite() const;
};

Vec pack(const AdjointState& a);
AdjointState unpack_adjoint(const Eigen::Ref<const Vec>& lambda, int n);

struct AdjointOptions {
  double rel_tol = 1e-10;
  double abs_tol = 1e-12;
  /// Selector band: h = 1 above tol_h, 0 below -tol_h, 0.5 in between.
  double tol_h = 1e-12;
};

/// Adjoint on the primal grid. adjoints[i] holds the raw multipliers at t_i+
/// ((q, s, p, r) for penalty runs, (q, sigma, p, r) for limit runs).
/// sigma = s - gamma h_w y+ r; sigma_left[i] differs from sigma[i] only at atoms.
struct AdjointTrajectory {
  int n = 0;
  std::optional<double> gamma;
  std::vector<double> times;
  std::vector<AdjointState> adjoints;
  std::vector<double> sigma;
  std::vector<double> sigma_left;
  /// mu(t) = sigma(t) - sigma(0) - int_0^t (-<d_y f, p> - d_y g r) ds
  std::vector<double> mu_cumulative;
  std::vector<double> hamiltonian;
  std::vector<double> h_y;
  std::vector<double> h_w;

  std::size_t size() const { return times.size(); }
  AdjointState limit_state(std::size_t i) const;
  AdjointState limit_state_left(std::size_t i) const;
};

/// Backward integration of
///   q' = -(d_x f)* p - d_x g r
///   s' = -<d_y f, p> - d_y g r + gamma h_y w+ r
///   p' = -q - (d_v f)* p - d_v g r
///   r' = -s - <d_w f, p> - d_w g r + gamma h_w y+ r
/// on the grid of a penalty trajectory. Throws IntegrationError at a blow-up.
AdjointTrajectory integrate_adjoint_penalty(const CanonicalModel& model, double gamma,
                                            const Trajectory& primal, const AdjointState& terminal,
                                            const AdjointOptions& opts = {});

/// Backward integration of the limiting system on a limit trajectory. Off the wall
/// dmu = 0; at an impact the atom of mu is fixed by continuity of H across the jump.
/// On contact arcs mu is taken without density.
AdjointTrajectory integrate_adjoint_limit(const CanonicalModel& model, const Trajectory& primal,
                                          const AdjointState& terminal,
                                          const AdjointOptions& opts = {});

/// Dispatches on primal.gamma.
AdjointTrajectory integrate_adjoint(const CanonicalModel& model, const Trajectory& primal,
                                    const AdjointState& terminal, const AdjointOptions& opts = {});

/// <q, v> + s w + <p, f> + r (g - gamma y+ w+), or the limit form without the
/// penalty term when gamma is empty.
double hamiltonian(const CanonicalModel& model, const std::optional<double>& gamma,
                   const SystemState& s, const AdjointState& a, const Vec& u);

struct MaxConditionTrace {
  /// H(u*) - H(u) at every grid point, using the control on the right.
  std::vector<double> residual;
  std::vector<Vec> suggested;
  std::vector<bool> degenerate;
  /// Largest residual over both one-sided controls at every grid point.
  double max_residual = 0.0;
  int degenerate_count = 0;
};

MaxConditionTrace max_condition_residual(const CanonicalModel& model, const Trajectory& primal,
                                         const AdjointTrajectory& adj, double switch_tol = 1e-9);

struct PMPTolerances {
  double residual = 1e-6;
  double max_condition = 1e-6;
  /// Drift allowed relative to 1 + |H_bar|.
  double hamiltonian = 1e-5;
  double hamiltonian_sign = 1e-6;
  double nontriviality = 1e-9;
  double mu = 1e-8;
  double contact = 1e-9;
  double switch_tol = 1e-9;
  double band_factor = 10.0;
  /// Coefficient of sigma in the r equation. +1 checks the alternative sign.
  double r_sigma_sign = -1.0;
};

struct PMPReport {
  double residual_q = 0.0;
  double residual_p = 0.0;
  double residual_r = 0.0;
  double sigma_defect = 0.0;
  double max_condition_violation = 0.0;
  double hamiltonian_drift = 0.0;
  double H_bar = 0.0;
  double nontriviality = 0.0;
  double mu_support_violation = 0.0;
  int degenerate_points = 0;
  bool pass = false;
  std::vector<std::string> failures;
};

/// Checks the limiting necessary conditions along primal with the given adjoint.
/// ODE residuals are defect rates |lambda_i - lambda~_i| / h_i, where lambda~_i is
/// obtained from lambda_{i+1} by an independent RK4 pass over the interval.
PMPReport verify_theorem2(const CanonicalModel& model, const Trajectory& primal,
                          const AdjointTrajectory& adj, const PMPTolerances& tol = {});

struct MainAssumptionReport {
  double measure_E = 0.0;
  double derivative_defect = 0.0;
  int intervals = 0;
};

/// E = {t : y >= 0, |w| <= tol_w}; reports its length and the largest difference
/// quotient of -d_w g r + gamma h_w y+ r on it.
MainAssumptionReport main_assumption_diagnostic(const CanonicalModel& model, const Trajectory& primal,
                                                const AdjointTrajectory& adj, double tol_w = 1e-6);

struct GradientCheck {
  double adjoint_value = 0.0;
  double fd_value = 0.0;
  double rel_gap = 0.0;
  bool inconclusive = false;
  std::string reason;
};

/// Compares <lambda(0), delta> with the central difference of <direction, z(T)>
/// along init + eps delta. delta defaults to the normalized all-ones vector.
GradientCheck adjoint_gradient_check(const CanonicalModel& model, double gamma,
                                     const BangBangControl& control, const SystemState& init,
                                     const Vec& direction, std::optional<Vec> delta = std::nullopt,
                                     const IntegratorConfig& cfg = {});

/// Terminal multipliers of unit norm. Ellipsoids: -V dz / |V dz|. Points: a vector
/// of the null space of the switching conditions (switching function zero at every
/// switch), chosen to best satisfy the maximum condition with H >= 0.
AdjointState terminal_covector(const CanonicalModel& model, const Trajectory& primal,
                               const TargetSpec& target, const AdjointOptions& opts = {});

/// Newton polish of an ellipsoid-target extremal: switch times and T are adjusted
/// so that z(T) lies on the boundary and the switching function vanishes at every
/// switch. Returns the input when Newton fails or T would grow by more than 1e-8.
OptimalResult polish_extremal(const CanonicalModel& model, const Dynamics& dyn,
                              const SystemState& init, const TargetSpec& target,
                              const OptimalResult& result, const IntegratorConfig& cfg = {});

/// Matrix of the Example 2 adjoint (q, sigma, p, r) on a contact arc where p + r = 0
/// and mu absorbs the wall reaction.
Mat example2_contact_matrix(double a, double b, double c);

struct SpectrumCheck {
  /// Eigenvalues of the contact matrix, computed with 50 significant digits.
  std::vector<std::complex<double>> eigenvalues;
  /// Roots of lambda^2 (lambda^2 - 2c lambda + 2a).
  std::vector<std::complex<double>> stated_roots;
  /// Roots of (lambda^2 + bc)(lambda^2 - 2c lambda + 2a), the exact characteristic polynomial.
  std::vector<std::complex<double>> factored_roots;
  /// Largest distance under the best pairing of eigenvalues and roots.
  double stated_gap = 0.0;
  double factored_gap = 0.0;
};

SpectrumCheck example2_contact_spectrum(double a, double b, double c);

}  // namespace backlash

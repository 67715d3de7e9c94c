#pragma once

#include "backlash/adjoint.hpp"

#include <cstdint>

namespace backlash {

/// dz/dt = A z + B u around (z*, u0).
struct LinearizedSystem {
  Mat A;
  Mat B;
  Vec z_star;
  Vec u0;
};

/// Central differences of the stacked dynamics (v, w, f, g) with step 1e-6 (1 + |z*|).
/// Throws NotEquilibrium when |f| + |g| > equilibrium_tol at (z*, u0).
LinearizedSystem linearize(const CanonicalModel& model, const SystemState& equilibrium,
                           std::optional<Vec> u0 = std::nullopt, double equilibrium_tol = 1e-8);

/// Numerical rank of [B, AB, ..., A^(d-1) B], singular values above d sigma_max 1e-12.
int controllability_rank(const Mat& A, const Mat& B);

/// Largest real part of the eigenvalues.
double spectral_abscissa(const Mat& A);

/// Feedback C with spectral abscissa of A + BC at most -margin. Returns zero when A
/// already meets the margin; otherwise Newton-Kleinman iteration on the Riccati
/// equation of the shifted pair (A + margin I, B), seeded by a Bass-type gain.
Mat stabilizing_feedback(const Mat& A, const Mat& B, double margin = 0.1);

/// Solution of A_cl' V + V A_cl = -I. Throws ArgumentError unless A_cl is Hurwitz.
Mat lyapunov_V(const Mat& A_cl);

/// Largest epsilon, halved for margin, such that u0 + C z stays in the box on
/// {<z, V z> <= epsilon}; cap when C = 0.
double pick_epsilon(const Mat& V, const Mat& C, const ControlBox& box, const Vec& u0, double cap = 1.0);

/// -V (z_T - z*) / |V (z_T - z*)| as multipliers (q, sigma, p, r).
AdjointState transversality(const Vec& z_T, const Vec& z_star, const Mat& V);

/// (epsilon / l_max) / (2 l_max sqrt(epsilon / l_min)), l the eigenvalues of V.
double rho_eigen_bound(const Mat& V, double epsilon);

/// rho(epsilon) = min of |z|^2 / (2 |V z|) over <z, V z> = epsilon. In the eigenbasis
/// of V the objective depends on the squared coordinates only, is quasi-convex in
/// them, and attains its minimum on an edge of the resulting simplex; every edge is
/// minimized by golden section.
double rho_bound(const Mat& V, double epsilon);

struct StableNeighborhood {
  LinearizedSystem lin;
  Mat C;
  Mat V;
  double epsilon = 0.0;
  double rho = 0.0;
  double closed_loop_abscissa = 0.0;
  double lyapunov_residual = 0.0;

  /// Terminal set {<z - z*, V (z - z*)> <= epsilon}.
  TargetSpec target() const;
};

StableNeighborhood build_stable_neighborhood(const CanonicalModel& model, const SystemState& equilibrium,
                                             std::optional<Vec> u0 = std::nullopt, double margin = 0.1,
                                             double epsilon_cap = 1.0);

struct NeighborhoodCheck {
  /// max over sampled unit z of <V z, (A + BC) z> + |z|^2 / 2.
  double lyapunov_excess = 0.0;
  /// max over sampled boundary points of the box violation of u0 + C z.
  double admissibility_excess = 0.0;
  int samples = 0;
};

NeighborhoodCheck sample_neighborhood(const StableNeighborhood& nb, const ControlBox& box, int samples,
                                      std::uint64_t seed);

struct NeighborhoodRun {
  OptimalResult result;
  Trajectory primal;
  AdjointTrajectory adjoint;
  PMPReport report;
  /// H_bar >= rho - tol_H.
  bool rho_satisfied = false;
};

/// Time-optimal limit run from init into the neighborhood's ellipsoid, polished,
/// with the adjoint started from the transversality covector and verified.
NeighborhoodRun optimal_run_into(const CanonicalModel& model, const StableNeighborhood& nb, const SystemState& init,
                                 const SolveOptions& opts, double tol_H = 1e-6);

}  // namespace backlash

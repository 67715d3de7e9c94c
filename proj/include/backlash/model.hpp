#pragma once

#include "backlash/types.hpp"

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace backlash {

/// Canonical coordinates: x, v in R^n, the constrained coordinate y <= 0 and w = dy/dt.
struct SystemState {
  Vec x;
  double y = 0.0;
  Vec v;
  double w = 0.0;

  int n() const { return static_cast<int>(x.size()); }
  bool finite() const;
};

Vec pack(const SystemState& s);
SystemState unpack(const Eigen::Ref<const Vec>& z, int n);

/// Closed interval per control channel.
struct ControlBox {
  Vec lo;
  Vec hi;

  int dim() const { return static_cast<int>(lo.size()); }
  bool contains(const Vec& u, double tol = 0.0) const;
  Vec center() const { return 0.5 * (lo + hi); }
  Vec half_width() const { return 0.5 * (hi - lo); }
  Vec clamp(const Vec& u) const;
};

/// Values of the six structural maps at a point (x, y, v):
///   f = f1 + f2 w + f3 u,  g = g1 + g2 w + <g3, u>.
struct AffineTerms {
  Vec f1;
  Vec f2;
  Mat f3;  // n x m
  double g1 = 0.0;
  double g2 = 0.0;
  Vec g3;  // m
};

/// Partial derivatives of (f, g) with respect to the packed state (x, y, v, w)
/// at a fixed control.
struct ModelJacobian {
  Mat df;  // n x (2n+2)
  Vec dg;  // 2n+2
};

struct CanonicalModel {
  std::string name;
  int n = 0;
  int m = 1;
  std::function<AffineTerms(const Vec& x, double y, const Vec& v)> terms;
  /// Optional exact derivatives; central differences are used when empty.
  std::function<ModelJacobian(const SystemState&, const Vec& u)> jacobian;
  ControlBox box;
  double growth_M = 1.0;

  /// Throws ContractViolation if the box or dimensions are malformed.
  void validate() const;
};

struct ForceValues {
  Vec f;
  double g = 0.0;
};

Vec eval_f(const CanonicalModel& model, const SystemState& s, const Vec& u);
double eval_g(const CanonicalModel& model, const SystemState& s, const Vec& u);
ForceValues eval_fg(const CanonicalModel& model, const SystemState& s, const Vec& u);

/// Exact jacobian when the model supplies one, central differences otherwise.
ModelJacobian model_jacobian(const CanonicalModel& model, const SystemState& s, const Vec& u);
ModelJacobian finite_difference_jacobian(const CanonicalModel& model, const SystemState& s,
                                         const Vec& u, double step = 1e-6);

/// Point body against a wall: y'' = u - N, u in [-1, 1]. No x block (n = 0).
CanonicalModel builtin_example1();

struct Example2Coefficients {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
};

Example2Coefficients example2_coefficients(double mass_M, double k, double alpha, double beta);

/// Piston inside a spring-mounted cylinder, written in x = MX + Y, y = Y - X.
CanonicalModel builtin_example2(double mass_M, double k, double alpha, double beta);
CanonicalModel example2_from_coefficients(const Example2Coefficients& coeffs);

struct GrowthReport {
  double max_ratio = 0.0;
  bool pass = false;
};

using GrowthSample = std::pair<SystemState, Vec>;

GrowthReport check_growth_bound(const CanonicalModel& model, std::span<const GrowthSample> samples,
                                double M);

/// Model selection by CLI identifier ("ex1", "ex2").
CanonicalModel model_from_id(const std::string& id, double mass_M = 1.0, double k = 2.0,
                             double alpha = 1.0, double beta = 1.0);

}  // namespace backlash

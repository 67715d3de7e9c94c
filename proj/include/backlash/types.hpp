#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace backlash {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller broke a documented precondition (dimensions, ranges).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// An argument value is out of its admissible range.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Step size collapsed below 1e-14 * t_final.
class StiffnessFailure : public Error {
 public:
  StiffnessFailure(const std::string& what, double time) : Error(what), time_(time) {}
  double time() const { return time_; }

 private:
  double time_;
};

/// Non-finite state or a failed event location; carries the bracketing interval.
class IntegrationError : public Error {
 public:
  IntegrationError(const std::string& what, double t_lo, double t_hi)
      : Error(what), t_lo_(t_lo), t_hi_(t_hi) {}
  double t_lo() const { return t_lo_; }
  double t_hi() const { return t_hi_; }

 private:
  double t_lo_;
  double t_hi_;
};

/// Target not reached within the horizon; carries the smallest residual seen.
class ReachabilityError : public Error {
 public:
  ReachabilityError(const std::string& what, double best_residual)
      : Error(what), best_residual_(best_residual) {}
  double best_residual() const { return best_residual_; }

 private:
  double best_residual_;
};

/// A switching structure cannot reach the target for any tried switch times.
class StructureError : public Error {
 public:
  using Error::Error;
};

/// Linearization point is not an equilibrium.
class NotEquilibrium : public Error {
 public:
  using Error::Error;
};

/// Pair (A, B) is not controllable.
class ControllabilityError : public Error {
 public:
  using Error::Error;
};

/// Terminal state coincides with the ellipsoid center.
class DegenerateTransversality : public Error {
 public:
  using Error::Error;
};

/// Position of each block inside the packed vector (x, y, v, w[, nu]).
struct StateLayout {
  int n = 0;

  int x() const { return 0; }
  int y() const { return n; }
  int v() const { return n + 1; }
  int w() const { return 2 * n + 1; }
  int nu() const { return 2 * n + 2; }
  int dim() const { return 2 * n + 2; }
  int dim_with_nu() const { return 2 * n + 3; }
};

}  // namespace backlash

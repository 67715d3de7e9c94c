#pragma once

#include "backlash/control.hpp"
#include "backlash/trajectory.hpp"

#include <optional>

namespace backlash {

struct IntegratorConfig {
  double rel_tol = 1e-8;
  double abs_tol = 1e-10;
  double dt_max = 0.1;
  /// Half-width of the |y| band treated as contact.
  double contact_band = 1e-9;
  /// Steps are capped at gamma_step_cap / sqrt(gamma) while y >= -contact_band.
  double gamma_step_cap = 0.1;

  void validate() const;
  bool operator==(const IntegratorConfig&) const = default;
};

/// Penalty dynamics with stiffness gamma, or the limit (impact/contact) dynamics.
struct Dynamics {
  std::optional<double> gamma;

  static Dynamics penalty(double gamma);
  static Dynamics limit() { return Dynamics{}; }
  bool is_limit() const { return !gamma.has_value(); }
};

enum class ContactMode { Free, Contact };

/// Integrator state between calls: time, packed (x, y, v, w, nu), limit-dynamics mode.
struct FlowPoint {
  double t = 0.0;
  Vec z;
  ContactMode mode = ContactMode::Free;

  SystemState state(int n) const { return unpack(z, n); }
  double nu(int n) const { return z[StateLayout{n}.nu()]; }
};

struct PenaltyStep {
  SystemState state;
  double nu_increment = 0.0;
  /// Scaled local error estimate (<= 1 means within tolerance).
  double error = 0.0;
};

/// Event-driven adaptive Dormand-Prince 5(4) integration of either dynamics.
/// Zero crossings of y and w (and, for the limit dynamics, release of contact)
/// are located by root finding on the step length and inserted as grid points,
/// so the right-hand side is smooth on every accepted step.
class Integrator {
 public:
  Integrator(const CanonicalModel& model, Dynamics dynamics, IntegratorConfig cfg = {});

  FlowPoint initial_point(const SystemState& init) const;

  /// Advances p to t_end. Grid points are appended to out when it is non-null;
  /// out must already hold the point p.
  void advance(FlowPoint& p, double t_end, const ControlSignal& control, Trajectory* out) const;

  Trajectory integrate(const ControlSignal& control, double t_final, const SystemState& init) const;

  const CanonicalModel& model() const { return model_; }
  const Dynamics& dynamics() const { return dynamics_; }
  const IntegratorConfig& config() const { return cfg_; }

  /// Right-hand side of the packed system in a fixed regime.
  Vec rhs(const Vec& z, const Vec& u, IntervalMode mode) const;
  /// Regime the penalty dynamics enters from z (sign of y, w, or their derivatives).
  IntervalMode penalty_regime(const Vec& z, const Vec& u) const;
  /// Control actually applied on a contact arc of the limit dynamics.
  Vec contact_control(const Vec& z, const Vec& nominal, bool singular) const;

  struct Trial {
    Vec z;
    Vec k_end;
    double error = 0.0;
  };
  /// Single Dormand-Prince step of length h in a fixed regime.
  Trial dopri(const Vec& z, const Vec& u, IntervalMode mode, double h) const;

 private:
  double error_norm(const Vec& z0, const Vec& z1, const Vec& err) const;
  void record(Trajectory* out, double t, const Vec& z, const Vec& u, const Vec& rate_left,
              const Vec& rate_right_prev, IntervalMode mode) const;
  void advance_piece(FlowPoint& p, double t_stop, const Vec& u_nominal, bool singular,
                     Trajectory* out, double& h_next) const;

  const CanonicalModel& model_;
  Dynamics dynamics_;
  IntegratorConfig cfg_;
  StateLayout layout_;
};

Trajectory integrate_penalty(const CanonicalModel& model, double gamma, const ControlSignal& control,
                             double t_final, const IntegratorConfig& cfg, const SystemState& init);

Trajectory integrate_limit(const CanonicalModel& model, const ControlSignal& control, double t_final,
                           const IntegratorConfig& cfg, const SystemState& init);

/// One embedded Dormand-Prince step of dx=v, dy=w, dv=f, dw=g - gamma y+ w+,
/// with the regime frozen at the start point.
PenaltyStep step_penalty(const CanonicalModel& model, double gamma, const SystemState& s,
                         const Vec& u, double dt, const IntegratorConfig& cfg = {});

/// Closed-form solution of dy/dt = M - (gamma/2) y^2, y(0) = 0:
///   y = sqrt(2M/gamma) tanh(sqrt(M gamma / 2) tau).
double boundary_layer_closed_form(double M_bar, double gamma, double tau);

/// Envelope of the post-impact velocity, M (1 - tanh^2(sqrt(M gamma / 2) tau)).
double inelastic_decay_envelope(double M_bar, double gamma, double tau);

}  // namespace backlash

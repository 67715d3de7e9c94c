#include "backlash/integrator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

namespace backlash {

namespace {

// Dormand-Prince 5(4) coefficients.
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                 b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;

int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

constexpr int kMaxEventRepeats = 8;

}  // namespace

void IntegratorConfig::validate() const {
  if (!(rel_tol > 0.0) || !(abs_tol > 0.0) || !(dt_max > 0.0) || !(contact_band > 0.0) ||
      !(gamma_step_cap > 0.0)) {
    throw ArgumentError("integrator tolerances must all be positive");
  }
}

Dynamics Dynamics::penalty(double gamma) {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ArgumentError("gamma must be positive");
  return Dynamics{gamma};
}

Integrator::Integrator(const CanonicalModel& model, Dynamics dynamics, IntegratorConfig cfg)
    : model_(model), dynamics_(dynamics), cfg_(cfg), layout_{model.n} {
  model_.validate();
  cfg_.validate();
}

FlowPoint Integrator::initial_point(const SystemState& init) const {
  if (init.n() != model_.n || init.v.size() != model_.n) {
    throw ContractViolation("initial state has wrong dimension");
  }
  if (!init.finite()) throw ArgumentError("initial state must be finite");
  FlowPoint p;
  p.z = Vec::Zero(layout_.dim_with_nu());
  p.z.head(layout_.dim()) = pack(init);
  return p;
}

Vec Integrator::rhs(const Vec& z, const Vec& u, IntervalMode mode) const {
  const int n = layout_.n;
  Vec dz(layout_.dim_with_nu());
  const SystemState s = unpack(z, n);
  dz.segment(layout_.x(), n) = s.v;
  if (mode == IntervalMode::Contact) {
    SystemState on_wall = s;
    on_wall.y = 0.0;
    on_wall.w = 0.0;
    const ForceValues fg = eval_fg(model_, on_wall, u);
    dz[layout_.y()] = 0.0;
    dz.segment(layout_.v(), n) = fg.f;
    dz[layout_.w()] = 0.0;
    dz[layout_.nu()] = fg.g;
    return dz;
  }
  const ForceValues fg = eval_fg(model_, s, u);
  const double push = (mode == IntervalMode::Penalty) ? *dynamics_.gamma * s.y * s.w : 0.0;
  dz[layout_.y()] = s.w;
  dz.segment(layout_.v(), n) = fg.f;
  dz[layout_.w()] = fg.g - push;
  dz[layout_.nu()] = push;
  return dz;
}

IntervalMode Integrator::penalty_regime(const Vec& z, const Vec& u) const {
  const double y = z[layout_.y()];
  const double w = z[layout_.w()];
  int sy = sign_of(y);
  int sw = sign_of(w);
  if (sy == 0 || sw == 0) {
    // w = 0 here, so dw/dt = g regardless of the penalty term.
    const double g = eval_g(model_, unpack(z, layout_.n), u);
    if (sy == 0) sy = sw != 0 ? sw : sign_of(g);
    if (sw == 0) sw = sign_of(g);
  }
  return (sy > 0 && sw > 0) ? IntervalMode::Penalty : IntervalMode::Free;
}

Vec Integrator::contact_control(const Vec& z, const Vec& nominal, bool singular) const {
  if (!singular) return nominal;
  const AffineTerms t = model_.terms(z.segment(layout_.x(), layout_.n), 0.0,
                                     z.segment(layout_.v(), layout_.n));
  const double g3sq = t.g3.squaredNorm();
  if (g3sq <= 1e-24) return nominal;
  const Vec c = model_.box.center();
  const double g_at_center = t.g1 + t.g3.dot(c);
  return model_.box.clamp(c - (g_at_center / g3sq) * t.g3);
}

Integrator::Trial Integrator::dopri(const Vec& z, const Vec& u, IntervalMode mode, double h) const {
  const Vec k1 = rhs(z, u, mode);
  const Vec k2 = rhs(z + h * (a21 * k1), u, mode);
  const Vec k3 = rhs(z + h * (a31 * k1 + a32 * k2), u, mode);
  const Vec k4 = rhs(z + h * (a41 * k1 + a42 * k2 + a43 * k3), u, mode);
  const Vec k5 = rhs(z + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), u, mode);
  const Vec k6 = rhs(z + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), u, mode);
  Trial trial;
  trial.z = z + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
  trial.k_end = rhs(trial.z, u, mode);
  const Vec err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * trial.k_end);
  trial.error = trial.z.allFinite() ? error_norm(z, trial.z, err) : std::numeric_limits<double>::infinity();
  return trial;
}

double Integrator::error_norm(const Vec& z0, const Vec& z1, const Vec& err) const {
  double acc = 0.0;
  for (int i = 0; i < err.size(); ++i) {
    const double scale = cfg_.abs_tol + cfg_.rel_tol * std::max(std::abs(z0[i]), std::abs(z1[i]));
    const double r = err[i] / scale;
    acc += r * r;
  }
  return std::sqrt(acc / static_cast<double>(err.size()));
}

void Integrator::record(Trajectory* out, double t, const Vec& z, const Vec& u, const Vec& rate_left,
                        const Vec& rate_right_prev, IntervalMode mode) const {
  if (!out) return;
  out->rate_right.back() = rate_right_prev;
  out->times.push_back(t);
  out->states.push_back(unpack(z, layout_.n));
  out->controls.push_back(u);
  out->nu.push_back(z[layout_.nu()]);
  out->rate_left.push_back(rate_left);
  out->rate_right.push_back(rate_left);
  out->interval_modes.push_back(mode);
}

void Integrator::advance(FlowPoint& p, double t_end, const ControlSignal& control,
                         Trajectory* out) const {
  if (control.dim() != model_.m) throw ContractViolation("control dimension does not match model");
  double h_next = std::min(cfg_.dt_max, std::max(t_end - p.t, 0.0));
  const double eps_t = 1e-14 * std::max(1.0, std::abs(t_end));
  while (t_end - p.t > eps_t) {
    const std::size_t piece = control.piece_index(p.t);
    const double t_stop = std::min(t_end, control.next_switch(p.t));
    advance_piece(p, t_stop, control.piece_value(piece), control.singular(piece), out, h_next);
    p.t = std::max(p.t, t_stop);
    if (t_stop < t_end && out) out->events.push_back({t_stop, EventKind::ControlSwitch});
  }
  p.t = std::max(p.t, t_end);
}

void Integrator::advance_piece(FlowPoint& p, double t_stop, const Vec& u_nominal, bool singular,
                               Trajectory* out, double& h_next) const {
  const int iy = layout_.y();
  const int iw = layout_.w();
  const double eps_t = 1e-14 * std::max(1.0, std::abs(t_stop));
  const double h_floor = 1e-14 * std::max(1.0, std::abs(t_stop));
  const bool limit = dynamics_.is_limit();
  const double cap = limit ? std::numeric_limits<double>::infinity()
                           : cfg_.gamma_step_cap / std::sqrt(*dynamics_.gamma);
  double last_event_time = std::numeric_limits<double>::quiet_NaN();
  int event_repeats = 0;

  while (t_stop - p.t > eps_t) {
    Vec u = u_nominal;
    IntervalMode mode = IntervalMode::Free;

    if (limit) {
      if (p.mode == ContactMode::Free && p.z[iy] >= -cfg_.contact_band) {
        if (p.z[iw] > cfg_.contact_band) {
          // Already on the wall and moving outward: inelastic impact now.
          const SystemState pre = unpack(p.z, layout_.n);
          const double mass = p.z[iw];
          p.z[iy] = 0.0;
          p.z[iw] = 0.0;
          p.z[layout_.nu()] += mass;
          if (out) {
            out->states.back() = unpack(p.z, layout_.n);
            out->nu.back() = p.z[layout_.nu()];
            out->atoms.push_back({p.t, mass, pre});
            out->events.push_back({p.t, EventKind::Impact});
          }
        }
        if (std::abs(p.z[iw]) <= cfg_.contact_band) {
          const Vec uc = contact_control(p.z, u_nominal, singular);
          SystemState wall = unpack(p.z, layout_.n);
          wall.y = 0.0;
          wall.w = 0.0;
          if (eval_g(model_, wall, uc) >= 0.0) {
            p.z[iy] = 0.0;
            p.z[iw] = 0.0;
            p.mode = ContactMode::Contact;
            if (out) {
              out->states.back() = unpack(p.z, layout_.n);
              out->events.push_back({p.t, EventKind::ContactEnter});
            }
          }
        }
      }
      if (p.mode == ContactMode::Contact) {
        u = contact_control(p.z, u_nominal, singular);
        const double g = eval_g(model_, unpack(p.z, layout_.n), u);
        if (g < 0.0) {
          p.mode = ContactMode::Free;
          u = u_nominal;
          if (out) out->events.push_back({p.t, EventKind::ContactExit});
        } else {
          mode = IntervalMode::Contact;
        }
      }
    } else {
      mode = penalty_regime(p.z, u);
    }
    if (out && out->controls.size() == 1 && out->times.size() == 1) out->controls.back() = u;

    double h_max = std::min(cfg_.dt_max, t_stop - p.t);
    if (!limit && p.z[iy] >= -cfg_.contact_band) {
      h_max = std::min(h_max, cap);
      if (cap < h_floor) {
        throw StiffnessFailure("gamma step cap below the step-size floor", p.t);
      }
    }
    double h = std::min(h_next, h_max);
    if (t_stop - (p.t + h) <= eps_t) h = t_stop - p.t;

    Trial trial = dopri(p.z, u, mode, h);
    while (trial.error > 1.0) {
      const double factor = std::isfinite(trial.error)
                                ? std::max(0.2, 0.9 * std::pow(trial.error, -0.2))
                                : 0.2;
      h *= factor;
      if (h < h_floor) {
        std::ostringstream msg;
        msg << "step size underflow at t=" << p.t;
        throw StiffnessFailure(msg.str(), p.t);
      }
      trial = dopri(p.z, u, mode, h);
    }
    const double err_accepted = trial.error;

    // Event detection: sign changes that alter the regime of the right-hand side.
    struct Crossing {
      int component;  // index in z, or -1 for contact release
      int s0;
    };
    std::array<Crossing, 2> crossings{};
    int n_cross = 0;
    auto component_value = [&](const Vec& z, int comp) {
      if (comp >= 0) return z[comp];
      return eval_g(model_, unpack(z, layout_.n), u);
    };
    if (mode == IntervalMode::Contact) {
      if (component_value(trial.z, -1) < 0.0) crossings[n_cross++] = {-1, 1};
    } else {
      const double g0 = eval_g(model_, unpack(p.z, layout_.n), u);
      int sy = sign_of(p.z[iy]);
      if (sy == 0) sy = sign_of(p.z[iw]) != 0 ? sign_of(p.z[iw]) : sign_of(g0);
      const int sy1 = sign_of(trial.z[iy]);
      if (sy != 0 && sy1 != 0 && sy1 != sy && (!limit || sy < 0)) crossings[n_cross++] = {iy, sy};
      if (!limit) {
        int sw = sign_of(p.z[iw]);
        if (sw == 0) sw = sign_of(g0);
        const int sw1 = sign_of(trial.z[iw]);
        if (sw != 0 && sw1 != 0 && sw1 != sw) crossings[n_cross++] = {iw, sw};
      }
    }

    int fired = -2;
    if (n_cross > 0) {
      double best_h = h;
      Trial best = trial;
      for (int c = 0; c < n_cross; ++c) {
        const int comp = crossings[c].component;
        const int s0 = crossings[c].s0;
        double a = 0.0, b = h;
        double fb = component_value(trial.z, comp);
        double fa = 0.0;
        Trial tb = trial;
        int side = 0;
        for (int it = 0; it < 100 && (b - a) > 1e-15 * std::max(1.0, std::abs(p.t)); ++it) {
          double m;
          if (fa == 0.0 || it % 4 == 3) {
            m = 0.5 * (a + b);
          } else {
            m = b - fb * (b - a) / (fb - fa);
            if (!(m > a && m < b)) m = 0.5 * (a + b);
          }
          Trial tm = dopri(p.z, u, mode, m);
          const double fm = component_value(tm.z, comp);
          if (fm == 0.0 || sign_of(fm) != s0) {
            b = m;
            fb = fm;
            tb = std::move(tm);
            if (side == -1) fa *= 0.5;
            side = -1;
            if (fm == 0.0) break;
          } else {
            a = m;
            fa = fm;
            if (side == 1) fb *= 0.5;
            side = 1;
          }
        }
        if (b < best_h || fired == -2) {
          best_h = b;
          best = std::move(tb);
          fired = comp;
        }
      }
      if (best_h <= eps_t) {
        if (p.t == last_event_time) {
          if (++event_repeats > kMaxEventRepeats) {
            throw IntegrationError("event location failed to make progress", p.t, p.t + h);
          }
        } else {
          event_repeats = 0;
        }
        last_event_time = p.t;
      }
      h = best_h;
      trial = std::move(best);
      if (fired >= 0) trial.z[fired] = 0.0;
    }

    const Vec k1 = rhs(p.z, u, mode);
    if (!trial.z.allFinite()) throw IntegrationError("non-finite state", p.t, p.t + h);
    p.t = (t_stop - (p.t + h) <= eps_t) ? t_stop : p.t + h;
    p.z = trial.z;

    // Post-event bookkeeping.
    if (n_cross > 0 && fired != -2 && limit) {
      if (fired == iy) {
        const SystemState pre = unpack(p.z, layout_.n);
        const double mass = std::max(p.z[iw], 0.0);
        p.z[iy] = 0.0;
        p.z[iw] = 0.0;
        p.z[layout_.nu()] += mass;
        record(out, p.t, p.z, u, trial.k_end, k1, mode);
        if (out) {
          out->atoms.push_back({p.t, mass, pre});
          out->events.push_back({p.t, EventKind::Impact});
        }
        const Vec uc = contact_control(p.z, u_nominal, singular);
        if (eval_g(model_, unpack(p.z, layout_.n), uc) >= 0.0) {
          p.mode = ContactMode::Contact;
          if (out) out->events.push_back({p.t, EventKind::ContactEnter});
        }
      } else {
        p.z[iy] = 0.0;
        p.z[iw] = 0.0;
        record(out, p.t, p.z, u, trial.k_end, k1, mode);
        p.mode = ContactMode::Free;
        if (out) out->events.push_back({p.t, EventKind::ContactExit});
      }
    } else {
      record(out, p.t, p.z, u, trial.k_end, k1, mode);
      if (n_cross > 0 && fired >= 0 && out) {
        out->events.push_back({p.t, fired == iy ? EventKind::YCross : EventKind::WCross});
      }
    }

    if (n_cross == 0) {
      const double factor = err_accepted > 0.0 ? std::min(5.0, std::max(0.2, 0.9 * std::pow(err_accepted, -0.2)))
                                               : 5.0;
      h_next = h * factor;
    } else {
      h_next = std::max(h_next * 0.5, h);
    }
    h_next = std::min(h_next, cfg_.dt_max);
    if (!(h_next > 0.0)) h_next = cfg_.dt_max;
  }
}

Trajectory Integrator::integrate(const ControlSignal& control, double t_final,
                                 const SystemState& init) const {
  if (!(t_final > 0.0)) throw ArgumentError("t_final must be positive");
  if (control.dim() != model_.m) throw ContractViolation("control dimension does not match model");
  if (dynamics_.is_limit() && init.y > cfg_.contact_band) {
    throw ContractViolation("limit dynamics require y <= 0 initially");
  }
  FlowPoint p = initial_point(init);
  Trajectory out;
  out.n = model_.n;
  out.gamma = dynamics_.gamma;
  const Vec& u0 = control.value(0.0);
  const IntervalMode mode0 = dynamics_.is_limit() ? IntervalMode::Free : penalty_regime(p.z, u0);
  const Vec r0 = rhs(p.z, u0, mode0);
  out.times.push_back(0.0);
  out.states.push_back(init);
  out.controls.push_back(u0);
  out.nu.push_back(0.0);
  out.rate_left.push_back(r0);
  out.rate_right.push_back(r0);
  advance(p, t_final, control, &out);
  return out;
}

Trajectory integrate_penalty(const CanonicalModel& model, double gamma, const ControlSignal& control,
                             double t_final, const IntegratorConfig& cfg, const SystemState& init) {
  return Integrator(model, Dynamics::penalty(gamma), cfg).integrate(control, t_final, init);
}

Trajectory integrate_limit(const CanonicalModel& model, const ControlSignal& control, double t_final,
                           const IntegratorConfig& cfg, const SystemState& init) {
  return Integrator(model, Dynamics::limit(), cfg).integrate(control, t_final, init);
}

PenaltyStep step_penalty(const CanonicalModel& model, double gamma, const SystemState& s,
                         const Vec& u, double dt, const IntegratorConfig& cfg) {
  if (!(dt > 0.0)) throw ArgumentError("dt must be positive");
  if (!s.finite()) throw IntegrationError("non-finite state passed to step_penalty", 0.0, dt);
  const Integrator integ(model, Dynamics::penalty(gamma), cfg);
  const FlowPoint p = integ.initial_point(s);
  const Integrator::Trial trial = integ.dopri(p.z, u, integ.penalty_regime(p.z, u), dt);
  if (!trial.z.allFinite()) throw IntegrationError("non-finite state in step_penalty", 0.0, dt);
  const int inu = StateLayout{model.n}.nu();
  return {unpack(trial.z, model.n), trial.z[inu] - p.z[inu], trial.error};
}

double boundary_layer_closed_form(double M_bar, double gamma, double tau) {
  if (!(M_bar > 0.0) || !(gamma > 0.0) || !(tau >= 0.0)) {
    throw ArgumentError("boundary layer requires M > 0, gamma > 0, tau >= 0");
  }
  return std::sqrt(2.0 * M_bar / gamma) * std::tanh(std::sqrt(M_bar * gamma / 2.0) * tau);
}

double inelastic_decay_envelope(double M_bar, double gamma, double tau) {
  const double th = std::tanh(std::sqrt(M_bar * gamma / 2.0) * tau);
  return M_bar * (1.0 - th * th);
}

}  // namespace backlash

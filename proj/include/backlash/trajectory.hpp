#pragma once

#include "backlash/model.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace backlash {

enum class EventKind { YCross, WCross, Impact, ContactEnter, ContactExit, ControlSwitch };

const char* to_string(EventKind kind);

struct TrajectoryEvent {
  double time = 0.0;
  EventKind kind = EventKind::YCross;
};

/// Impulsive part of the contact measure nu: a velocity jump w(t-) -> 0.
struct Atom {
  double time = 0.0;
  double mass = 0.0;
  SystemState pre_state;
};

/// Regime used on one grid interval.
enum class IntervalMode : std::uint8_t { Free = 0, Penalty = 1, Contact = 2 };

/// Time grid with states, the control applied, and the cumulative contact impulse
///   nu(t) = int_0^t gamma (y)_+ (w)_+ ds        (penalty runs)
///   nu(t) = sum of atoms + int g dt on contact   (limit runs)
/// Controls are left-continuous: controls[i] is the value used on (t_{i-1}, t_i].
/// At an impact time the stored state is the post-impact one; the pre-impact state
/// lives in the matching Atom.
struct Trajectory {
  int n = 0;
  std::vector<double> times;
  std::vector<SystemState> states;
  std::vector<Vec> controls;
  std::vector<double> nu;
  std::optional<double> gamma;  // empty for the limit dynamics
  std::vector<Atom> atoms;
  std::vector<TrajectoryEvent> events;
  /// Packed derivative of (x, y, v, w, nu) at t_i from the interval on the left / right.
  std::vector<Vec> rate_left;
  std::vector<Vec> rate_right;
  /// Regime on (t_i, t_{i+1}); size() - 1 entries.
  std::vector<IntervalMode> interval_modes;

  bool is_limit() const { return !gamma.has_value(); }
  std::size_t size() const { return times.size(); }
  double t_final() const { return times.empty() ? 0.0 : times.back(); }

  /// Atom located exactly at grid index i, if any.
  const Atom* atom_at(std::size_t i) const;
  /// State approached from the left at grid index i (differs only at atoms).
  SystemState left_state(std::size_t i) const;
  double left_nu(std::size_t i) const;

  struct Sample {
    SystemState state;
    double nu = 0.0;
  };
  /// Cubic Hermite interpolation; at an atom time the post-impact value is returned.
  Sample sample(double t) const;

  double max_y() const;
  /// Largest absolute entry of any stored state.
  double sup_abs_state() const;
  double sup_abs_w() const;
  std::vector<double> event_times(EventKind kind) const;
};

}  // namespace backlash

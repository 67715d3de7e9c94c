#pragma once

#include "backlash/model.hpp"

#include <limits>
#include <vector>

namespace backlash {

/// Piecewise-constant control. Piece i is applied on [switch_times[i-1], switch_times[i]),
/// with the first piece starting at -inf and the last extending to +inf.
/// A piece may be flagged singular: on a contact arc of the limit dynamics it is then
/// replaced by the value that keeps the contact force at zero.
class ControlSignal {
 public:
  ControlSignal() = default;
  explicit ControlSignal(Vec constant_value);
  ControlSignal(std::vector<double> switch_times, std::vector<Vec> values,
                std::vector<bool> singular = {});

  std::size_t pieces() const { return values_.size(); }
  int dim() const { return values_.empty() ? 0 : static_cast<int>(values_.front().size()); }
  std::size_t piece_index(double t) const;
  const Vec& value(double t) const { return values_[piece_index(t)]; }
  const Vec& piece_value(std::size_t i) const { return values_[i]; }
  bool singular(std::size_t i) const { return !singular_.empty() && singular_[i]; }
  /// First switch time strictly greater than t, or +inf.
  double next_switch(double t) const;
  const std::vector<double>& switch_times() const { return switches_; }

 private:
  std::vector<double> switches_;
  std::vector<Vec> values_;
  std::vector<bool> singular_;
};

/// Bang-bang control: every channel starts at one box endpoint and toggles to the
/// other endpoint at each of its switch times.
struct BangBangControl {
  Vec initial;                                   // per channel, lo_i or hi_i
  std::vector<std::vector<double>> switch_times; // per channel, strictly increasing, < horizon
  double horizon = 0.0;

  static BangBangControl single_channel(double initial_value, std::vector<double> switches,
                                        double horizon);

  int channels() const { return static_cast<int>(initial.size()); }
  std::size_t total_switches() const;
  /// Throws ContractViolation unless the invariants hold for the given box.
  void validate(const ControlBox& box) const;
  ControlSignal to_signal(const ControlBox& box) const;
  /// Sign pattern of channel 0 over its arcs, e.g. {+1, -1, +1}.
  std::vector<int> sign_pattern(const ControlBox& box, int channel = 0) const;
};

}  // namespace backlash

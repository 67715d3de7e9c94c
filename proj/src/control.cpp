#include "backlash/control.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace backlash {

ControlSignal::ControlSignal(Vec constant_value) { values_.push_back(std::move(constant_value)); }

ControlSignal::ControlSignal(std::vector<double> switch_times, std::vector<Vec> values,
                             std::vector<bool> singular)
    : switches_(std::move(switch_times)), values_(std::move(values)), singular_(std::move(singular)) {
  if (values_.size() != switches_.size() + 1) {
    throw ContractViolation("control signal needs exactly one more value than switch times");
  }
  if (!singular_.empty() && singular_.size() != values_.size()) {
    throw ContractViolation("control signal: singular flags must match the pieces");
  }
  for (std::size_t i = 1; i < switches_.size(); ++i) {
    if (!(switches_[i] > switches_[i - 1])) throw ContractViolation("control switch times must increase");
  }
  for (const Vec& u : values_) {
    if (u.size() != values_.front().size()) throw ContractViolation("control values differ in dimension");
  }
}

std::size_t ControlSignal::piece_index(double t) const {
  return static_cast<std::size_t>(std::upper_bound(switches_.begin(), switches_.end(), t) -
                                  switches_.begin());
}

double ControlSignal::next_switch(double t) const {
  auto it = std::upper_bound(switches_.begin(), switches_.end(), t);
  return it == switches_.end() ? std::numeric_limits<double>::infinity() : *it;
}

BangBangControl BangBangControl::single_channel(double initial_value, std::vector<double> switches,
                                                double horizon) {
  BangBangControl c;
  c.initial = Vec::Constant(1, initial_value);
  c.switch_times.push_back(std::move(switches));
  c.horizon = horizon;
  return c;
}

std::size_t BangBangControl::total_switches() const {
  std::size_t total = 0;
  for (const auto& s : switch_times) total += s.size();
  return total;
}

void BangBangControl::validate(const ControlBox& box) const {
  if (initial.size() != box.dim() || static_cast<int>(switch_times.size()) != box.dim()) {
    throw ContractViolation("bang-bang control has wrong channel count");
  }
  if (!(horizon >= 0.0)) throw ContractViolation("bang-bang horizon must be nonnegative");
  for (int i = 0; i < box.dim(); ++i) {
    if (initial[i] != box.lo[i] && initial[i] != box.hi[i]) {
      throw ContractViolation("bang-bang initial value must be a box endpoint");
    }
    const auto& s = switch_times[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (!(s[k] > 0.0) || !(s[k] < horizon)) throw ContractViolation("switch time outside (0, T)");
      if (k > 0 && !(s[k] > s[k - 1])) throw ContractViolation("switch times must strictly increase");
    }
  }
}

ControlSignal BangBangControl::to_signal(const ControlBox& box) const {
  validate(box);
  std::set<double> all;
  for (const auto& s : switch_times) all.insert(s.begin(), s.end());
  std::vector<double> breaks(all.begin(), all.end());
  std::vector<Vec> values;
  values.reserve(breaks.size() + 1);
  auto value_at = [&](double t) {
    Vec u = initial;
    for (int i = 0; i < box.dim(); ++i) {
      const auto& s = switch_times[static_cast<std::size_t>(i)];
      const auto toggles = std::upper_bound(s.begin(), s.end(), t) - s.begin();
      if (toggles % 2 == 1) u[i] = (initial[i] == box.lo[i]) ? box.hi[i] : box.lo[i];
    }
    return u;
  };
  values.push_back(value_at(-1.0));
  for (double b : breaks) values.push_back(value_at(b));
  return ControlSignal(std::move(breaks), std::move(values));
}

std::vector<int> BangBangControl::sign_pattern(const ControlBox& box, int channel) const {
  const auto& s = switch_times[static_cast<std::size_t>(channel)];
  const double mid = box.center()[channel];
  int sign = initial[channel] > mid ? 1 : -1;
  std::vector<int> pattern{sign};
  for (std::size_t k = 0; k < s.size(); ++k) {
    sign = -sign;
    pattern.push_back(sign);
  }
  return pattern;
}

}  // namespace backlash

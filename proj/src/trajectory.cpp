#include "backlash/trajectory.hpp"

#include <algorithm>
#include <cmath>

namespace backlash {

const char* to_string(EventKind kind) {
  switch (kind) {
    case EventKind::YCross: return "y_cross";
    case EventKind::WCross: return "w_cross";
    case EventKind::Impact: return "impact";
    case EventKind::ContactEnter: return "contact_enter";
    case EventKind::ContactExit: return "contact_exit";
    case EventKind::ControlSwitch: return "control_switch";
  }
  return "unknown";
}

const Atom* Trajectory::atom_at(std::size_t i) const {
  for (const Atom& a : atoms) {
    if (a.time == times[i]) return &a;
  }
  return nullptr;
}

SystemState Trajectory::left_state(std::size_t i) const {
  if (const Atom* a = atom_at(i)) return a->pre_state;
  return states[i];
}

double Trajectory::left_nu(std::size_t i) const {
  if (const Atom* a = atom_at(i)) return nu[i] - a->mass;
  return nu[i];
}

Trajectory::Sample Trajectory::sample(double t) const {
  if (times.empty()) throw ContractViolation("sample on an empty trajectory");
  if (t <= times.front()) return {states.front(), nu.front()};
  if (t >= times.back()) return {states.back(), nu.back()};
  const auto it = std::upper_bound(times.begin(), times.end(), t);
  const std::size_t i1 = static_cast<std::size_t>(it - times.begin());
  const std::size_t i0 = i1 - 1;
  if (t == times[i0]) return {states[i0], nu[i0]};

  const StateLayout L{n};
  Vec z0(L.dim_with_nu()), z1(L.dim_with_nu());
  z0.head(L.dim()) = pack(states[i0]);
  z0[L.nu()] = nu[i0];
  z1.head(L.dim()) = pack(left_state(i1));
  z1[L.nu()] = left_nu(i1);

  const double h = times[i1] - times[i0];
  const double s = (t - times[i0]) / h;
  const double h00 = (1 + 2 * s) * (1 - s) * (1 - s);
  const double h10 = s * (1 - s) * (1 - s);
  const double h01 = s * s * (3 - 2 * s);
  const double h11 = s * s * (s - 1);
  Vec z = h00 * z0 + h01 * z1;
  if (rate_right.size() == times.size() && rate_left.size() == times.size()) {
    z += h * (h10 * rate_right[i0] + h11 * rate_left[i1]);
  }
  return {unpack(z, n), z[L.nu()]};
}

double Trajectory::max_y() const {
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& s : states) m = std::max(m, s.y);
  for (const auto& a : atoms) m = std::max(m, a.pre_state.y);
  return m;
}

double Trajectory::sup_abs_state() const {
  double m = 0.0;
  for (const auto& s : states) m = std::max(m, pack(s).cwiseAbs().maxCoeff());
  for (const auto& a : atoms) m = std::max(m, pack(a.pre_state).cwiseAbs().maxCoeff());
  return m;
}

double Trajectory::sup_abs_w() const {
  double m = 0.0;
  for (const auto& s : states) m = std::max(m, std::abs(s.w));
  for (const auto& a : atoms) m = std::max(m, std::abs(a.pre_state.w));
  return m;
}

std::vector<double> Trajectory::event_times(EventKind kind) const {
  std::vector<double> out;
  for (const auto& e : events) {
    if (e.kind == kind) out.push_back(e.time);
  }
  return out;
}

}  // namespace backlash

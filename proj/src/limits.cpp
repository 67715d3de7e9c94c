#include "backlash/limits.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <sstream>

namespace backlash {

namespace {

double nu_at(const Trajectory& tr, double t) {
  const auto& ts = tr.times;
  if (t <= ts.front()) return tr.nu.front();
  if (t >= ts.back()) return tr.nu.back();
  const auto it = std::upper_bound(ts.begin(), ts.end(), t);
  const std::size_t i1 = static_cast<std::size_t>(it - ts.begin());
  const std::size_t i0 = i1 - 1;
  const double s = (t - ts[i0]) / (ts[i1] - ts[i0]);
  return tr.nu[i0] + s * (tr.left_nu(i1) - tr.nu[i0]);
}

std::vector<double> window_increments(const Trajectory& tr, double width) {
  std::vector<double> inc(tr.size());
  for (std::size_t i = 0; i < tr.size(); ++i) inc[i] = nu_at(tr, tr.times[i] + width) - tr.nu[i];
  return inc;
}

double sup_xyv_gap(const Trajectory::Sample& a, const Trajectory::Sample& b) {
  double g = std::abs(a.state.y - b.state.y);
  if (a.state.x.size() > 0) {
    g = std::max(g, (a.state.x - b.state.x).cwiseAbs().maxCoeff());
    g = std::max(g, (a.state.v - b.state.v).cwiseAbs().maxCoeff());
  }
  return g;
}

std::vector<double> upward_crossings(const Trajectory& tr, double w_min) {
  std::vector<double> out;
  for (double t : tr.event_times(EventKind::YCross)) {
    const auto it = std::lower_bound(tr.times.begin(), tr.times.end(), t);
    if (it == tr.times.end()) continue;
    const std::size_t i = static_cast<std::size_t>(it - tr.times.begin());
    if (tr.states[i].w > w_min) out.push_back(t);
  }
  for (const Atom& a : tr.atoms) out.push_back(a.time);
  std::sort(out.begin(), out.end());
  return out;
}

bool in_band(double t, const std::vector<double>& centers, double half_width) {
  for (double c : centers) {
    if (std::abs(t - c) <= half_width) return true;
  }
  return false;
}

}  // namespace

GammaSweep gamma_sweep(const CanonicalModel& model, const ControlSignal& control,
                       const SystemState& init, double t_final, std::vector<double> gammas,
                       const IntegratorConfig& cfg, int grid_points) {
  if (gammas.size() < 3) throw ArgumentError("at least 3 gammas required");
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    if (!(gammas[i] > 0.0)) throw ArgumentError("gamma must be positive");
    if (i > 0 && !(gammas[i] > gammas[i - 1])) throw ArgumentError("gammas must be strictly increasing");
  }
  if (grid_points < 1000) throw ArgumentError("sweep grid needs at least 1000 points");

  std::vector<std::future<Trajectory>> jobs;
  jobs.reserve(gammas.size());
  for (double g : gammas) {
    jobs.push_back(std::async(std::launch::async, [&, g] {
      return integrate_penalty(model, g, control, t_final, cfg, init);
    }));
  }
  GammaSweep sweep;
  sweep.gammas = gammas;
  sweep.init = init;
  sweep.t_final = t_final;
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    std::ostringstream tag;
    tag << "gamma=" << gammas[k] << ": ";
    try {
      sweep.trajectories.push_back(jobs[k].get());
    } catch (const StiffnessFailure& e) {
      for (std::size_t j = k + 1; j < jobs.size(); ++j) jobs[j].wait();
      throw StiffnessFailure(tag.str() + e.what(), e.time());
    } catch (const IntegrationError& e) {
      for (std::size_t j = k + 1; j < jobs.size(); ++j) jobs[j].wait();
      throw IntegrationError(tag.str() + e.what(), e.t_lo(), e.t_hi());
    }
  }
  sweep.grid.resize(static_cast<std::size_t>(grid_points));
  for (int j = 0; j < grid_points; ++j) sweep.grid[j] = t_final * j / (grid_points - 1);
  for (const Trajectory& tr : sweep.trajectories) {
    std::vector<Trajectory::Sample> row;
    row.reserve(sweep.grid.size());
    for (double t : sweep.grid) row.push_back(tr.sample(t));
    sweep.resampled.push_back(std::move(row));
  }
  return sweep;
}

double fit_layer_exponent(const std::vector<std::pair<double, double>>& sup_y_by_gamma) {
  std::vector<double> lx, ly;
  for (const auto& [g, y] : sup_y_by_gamma) {
    if (g > 0.0 && y > 0.0) {
      lx.push_back(std::log(g));
      ly.push_back(std::log(y));
    }
  }
  if (lx.size() < 3) throw ArgumentError("layer fit needs at least 3 positive max-y values");
  const double n = static_cast<double>(lx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  if (sxx == 0.0) throw ArgumentError("layer fit needs distinct gammas");
  return sxy / sxx;
}

double atom_window(double gamma) { return 5.0 / std::sqrt(gamma); }

double max_jump(const Trajectory& traj) {
  if (traj.is_limit()) {
    double m = 0.0;
    for (const Atom& a : traj.atoms) m = std::max(m, a.mass);
    return m;
  }
  const auto inc = window_increments(traj, atom_window(*traj.gamma));
  return inc.empty() ? 0.0 : *std::max_element(inc.begin(), inc.end());
}

CumulativeMeasure extract_measure(const Trajectory& traj, double atom_threshold) {
  if (traj.nu.size() != traj.times.size()) throw ContractViolation("trajectory has no nu values");
  CumulativeMeasure out;
  out.grid = traj.times;
  out.cumulative = traj.nu;
  if (traj.is_limit()) {
    for (const Atom& a : traj.atoms) {
      if (a.mass > atom_threshold) out.atoms.emplace_back(a.time, a.mass);
    }
    return out;
  }
  const double width = atom_window(*traj.gamma);
  const std::vector<double> inc = window_increments(traj, width);
  std::vector<bool> taken(inc.size(), false);
  while (true) {
    std::size_t best = inc.size();
    for (std::size_t i = 0; i < inc.size(); ++i) {
      if (!taken[i] && inc[i] > atom_threshold && (best == inc.size() || inc[i] > inc[best])) best = i;
    }
    if (best == inc.size()) break;
    const double t0 = traj.times[best];
    const double half = traj.nu[best] + 0.5 * inc[best];
    double t_atom = t0;
    for (std::size_t j = best; j < traj.size() && traj.times[j] <= t0 + width; ++j) {
      if (traj.nu[j] >= half) {
        t_atom = traj.times[j];
        break;
      }
    }
    out.atoms.emplace_back(t_atom, inc[best]);
    for (std::size_t i = 0; i < inc.size(); ++i) {
      if (std::abs(traj.times[i] - t0) < width) taken[i] = true;
    }
  }
  std::sort(out.atoms.begin(), out.atoms.end());
  return out;
}

CumulativeMeasure extract_measure(const Trajectory& traj) {
  return extract_measure(traj, 0.1 * max_jump(traj));
}

ConvergenceReport certify_backlash(const GammaSweep& sweep, const CertificationThresholds& th) {
  const std::size_t K = sweep.trajectories.size();
  if (K < 2 || sweep.resampled.size() != K || sweep.gammas.size() != K) {
    throw ContractViolation("malformed gamma sweep");
  }
  ConvergenceReport rep;
  rep.band_factor = th.band_factor;
  const Trajectory& finest = sweep.trajectories.back();
  const double g_max = sweep.gammas.back();

  rep.threshold_xyv = th.xyv.value_or(1e-3 * (1.0 + finest.sup_abs_state()));
  rep.threshold_nu = th.nu.value_or(1e-2 * finest.nu.back());
  rep.threshold_w = th.w.value_or(1e-2 * (1.0 + finest.sup_abs_w()));

  for (std::size_t k = 0; k < K; ++k) {
    rep.sup_y_by_gamma.emplace_back(sweep.gammas[k], sweep.trajectories[k].max_y());
  }
  try {
    rep.layer_exponent = fit_layer_exponent(rep.sup_y_by_gamma);
    rep.layer_exponent_valid = true;
  } catch (const ArgumentError&) {
    rep.layer_exponent_valid = false;
  }

  rep.impact_times = upward_crossings(finest, 1e-3 * (1.0 + finest.sup_abs_w()));

  const double floor = 1e-9 * (1.0 + finest.sup_abs_state());
  for (std::size_t k = 0; k + 1 < K; ++k) {
    const double half = th.band_factor / std::sqrt(sweep.gammas[k]);
    double gxyv = 0.0, gw = 0.0, gnu = 0.0;
    for (std::size_t j = 0; j < sweep.grid.size(); ++j) {
      const auto& a = sweep.resampled[k][j];
      const auto& b = sweep.resampled[k + 1][j];
      gxyv = std::max(gxyv, sup_xyv_gap(a, b));
      if (!in_band(sweep.grid[j], rep.impact_times, half)) {
        gw = std::max(gw, std::abs(a.state.w - b.state.w));
        gnu = std::max(gnu, std::abs(a.nu - b.nu));
      }
    }
    rep.uniform_xyv_gaps.push_back(gxyv);
    rep.w_pointwise_gaps.push_back(gw);
    rep.nu_weakstar_gaps.push_back(gnu);
  }

  // (i) uniform convergence of (x, y, v)
  const auto& gx = rep.uniform_xyv_gaps;
  bool decreasing = true;
  for (std::size_t i = 1; i < gx.size(); ++i) {
    if (gx[i] > gx[i - 1] + floor) decreasing = false;
  }
  const double g_last = gx.back();
  if (g_last <= floor) {
    rep.xyv_tail_estimate = g_last;
  } else if (gx.size() >= 2 && gx[gx.size() - 2] > 0.0 && g_last < gx[gx.size() - 2]) {
    const double rho = g_last / gx[gx.size() - 2];
    rep.xyv_tail_estimate = g_last * rho / (1.0 - rho);
  } else {
    rep.xyv_tail_estimate = std::numeric_limits<double>::infinity();
  }
  rep.xyv_ok = decreasing && rep.xyv_tail_estimate <= rep.threshold_xyv;
  if (!decreasing) rep.failures.push_back("xyv gaps are not decreasing");
  if (!(rep.xyv_tail_estimate <= rep.threshold_xyv)) rep.failures.push_back("xyv tail estimate above threshold");

  // (ii) convergence of the cumulative contact impulse
  rep.nu_ok = rep.nu_weakstar_gaps.back() <= rep.threshold_nu;
  if (!rep.nu_ok) rep.failures.push_back("nu gap above threshold");

  // (iii) boundary-layer scaling at the largest gamma
  const double y_last = rep.sup_y_by_gamma.back().second;
  if (y_last <= 0.0) {
    rep.layer_C = 0.0;
    rep.layer_ok = true;
  } else {
    double C = 0.0;
    for (std::size_t k = 0; k + 1 < K; ++k) {
      C = std::max(C, rep.sup_y_by_gamma[k].second * std::sqrt(rep.sup_y_by_gamma[k].first));
    }
    rep.layer_C = C;
    rep.layer_ok = y_last <= (1.0 + th.layer_slack) * C / std::sqrt(g_max);
  }
  if (!rep.layer_ok) rep.failures.push_back("max y above layer_C / sqrt(gamma)");

  // (iv) inelastic shock at every impact
  rep.shock_ok = true;
  for (double t_imp : rep.impact_times) {
    const double t = t_imp + th.band_factor / std::sqrt(g_max);
    if (t > finest.t_final()) {
      rep.post_impact_w.push_back(std::numeric_limits<double>::quiet_NaN());
      rep.shock_ok = false;
      rep.failures.push_back("impact too close to the horizon to observe the shock");
      continue;
    }
    const double w = finest.sample(t).state.w;
    rep.post_impact_w.push_back(w);
    if (!(w <= rep.threshold_w)) {
      rep.shock_ok = false;
      rep.failures.push_back("post-impact w did not decay");
    }
  }

  rep.certified = rep.xyv_ok && rep.nu_ok && rep.layer_ok && rep.shock_ok;
  return rep;
}

}  // namespace backlash

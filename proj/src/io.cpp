#include "backlash/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace backlash {

namespace {

std::vector<std::vector<double>> read_csv(const std::string& path, std::size_t columns, std::string* header) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ArgumentError("'" + path + "' is empty");
  if (header) *header = line;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ArgumentError("'" + path + "' line " + std::to_string(rows.size() + 2) + ": bad number '" + cell + "'");
      }
    }
    if (row.size() != columns) {
      throw ArgumentError("'" + path + "' line " + std::to_string(rows.size() + 2) + ": expected " +
                          std::to_string(columns) + " columns");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string csv_header_state(int n, const char* x, const char* y, const char* v, const char* w) {
  std::string h;
  for (int i = 1; i <= n; ++i) h += std::string(",") + x + "_" + std::to_string(i);
  h += std::string(",") + y;
  for (int i = 1; i <= n; ++i) h += std::string(",") + v + "_" + std::to_string(i);
  h += std::string(",") + w;
  return h;
}

/// d/dt (x, y, v, w, nu) on an interval of the given regime.
Vec rate(const CanonicalModel& model, const std::optional<double>& gamma, const SystemState& s, const Vec& u,
         IntervalMode mode) {
  const StateLayout L{model.n};
  Vec dz = Vec::Zero(L.dim_with_nu());
  dz.segment(L.x(), model.n) = s.v;
  if (mode == IntervalMode::Contact) {
    SystemState wall = s;
    wall.y = 0.0;
    wall.w = 0.0;
    const ForceValues fg = eval_fg(model, wall, u);
    dz.segment(L.v(), model.n) = fg.f;
    dz[L.nu()] = fg.g;
    return dz;
  }
  const ForceValues fg = eval_fg(model, s, u);
  dz[L.y()] = s.w;
  dz.segment(L.v(), model.n) = fg.f;
  dz[L.w()] = fg.g;
  if (gamma && mode == IntervalMode::Penalty) {
    const double push = *gamma * s.y * s.w;
    dz[L.w()] -= push;
    dz[L.nu()] = push;
  }
  return dz;
}

double selector(double v) {
  const double tol = AdjointOptions{}.tol_h;
  if (v > tol) return 1.0;
  if (v < -tol) return 0.0;
  return 0.5;
}

}  // namespace

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write '" + path + "'");
  const int m = traj.controls.empty() ? 0 : static_cast<int>(traj.controls.front().size());
  out << "t" << csv_header_state(traj.n, "x", "y", "v", "w");
  for (int j = 1; j <= m; ++j) out << ",u_" << j;
  out << ",nu\n";
  auto row = [&](double t, const SystemState& s, const Vec& u, double nu) {
    out << format_double(t);
    for (double v : pack(s)) out << ',' << format_double(v);
    for (double v : u) out << ',' << format_double(v);
    out << ',' << format_double(nu) << '\n';
  };
  for (std::size_t i = 0; i < traj.size(); ++i) {
    if (const Atom* a = traj.atom_at(i)) row(traj.times[i], a->pre_state, traj.controls[i], traj.left_nu(i));
    row(traj.times[i], traj.states[i], traj.controls[i], traj.nu[i]);
  }
}

Trajectory read_trajectory_csv(const std::string& path, const CanonicalModel& model, std::optional<double> gamma,
                               const IntegratorConfig& cfg) {
  const StateLayout L{model.n};
  const int d = L.dim();
  const auto rows = read_csv(path, static_cast<std::size_t>(1 + d + model.m + 1), nullptr);
  if (rows.size() < 2) throw ArgumentError("'" + path + "' needs at least two rows");
  Trajectory tr;
  tr.n = model.n;
  tr.gamma = gamma;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& r = rows[k];
    const SystemState s = unpack(Eigen::Map<const Vec>(r.data() + 1, d), model.n);
    const Vec u = Eigen::Map<const Vec>(r.data() + 1 + d, model.m);
    const double nu = r.back();
    if (k + 1 < rows.size() && rows[k + 1][0] == r[0]) {
      tr.atoms.push_back({r[0], rows[k + 1].back() - nu, s});
      tr.events.push_back({r[0], EventKind::Impact});
      continue;
    }
    if (!tr.times.empty() && !(r[0] > tr.times.back())) {
      throw ArgumentError("'" + path + "': times must increase (row " + std::to_string(k + 2) + ")");
    }
    tr.times.push_back(r[0]);
    tr.states.push_back(s);
    tr.controls.push_back(u);
    tr.nu.push_back(nu);
  }
  const std::size_t N = tr.size();
  tr.interval_modes.resize(N - 1);
  for (std::size_t i = 0; i + 1 < N; ++i) {
    const SystemState& a = tr.states[i];
    const SystemState b = tr.left_state(i + 1);
    IntervalMode mode = IntervalMode::Free;
    if (!gamma) {
      const bool wall = [&](const SystemState& s) {
        return std::abs(s.y) <= cfg.contact_band && std::abs(s.w) <= cfg.contact_band;
      }(a) && std::abs(b.y) <= cfg.contact_band && std::abs(b.w) <= cfg.contact_band;
      if (wall) mode = IntervalMode::Contact;
    } else if (a.y + b.y > 0.0 && a.w + b.w > 0.0) {
      mode = IntervalMode::Penalty;
    }
    tr.interval_modes[i] = mode;
  }
  tr.rate_left.resize(N);
  tr.rate_right.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    const IntervalMode right_mode = i + 1 < N ? tr.interval_modes[i] : tr.interval_modes[i - 1];
    const IntervalMode left_mode = i > 0 ? tr.interval_modes[i - 1] : right_mode;
    const Vec& u_right = tr.controls[std::min(i + 1, N - 1)];
    tr.rate_right[i] = rate(model, gamma, tr.states[i], u_right, right_mode);
    tr.rate_left[i] = rate(model, gamma, tr.left_state(i), tr.controls[i], left_mode);
  }
  for (std::size_t i = 1; i + 1 < N; ++i) {
    if (tr.controls[i] != tr.controls[i + 1]) tr.events.push_back({tr.times[i], EventKind::ControlSwitch});
  }
  return tr;
}

void write_adjoint_csv(const std::string& path, const AdjointTrajectory& adj) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write '" + path + "'");
  out << "t" << csv_header_state(adj.n, "q", "sigma", "p", "r") << ",sigma_left,mu,H\n";
  for (std::size_t i = 0; i < adj.size(); ++i) {
    out << format_double(adj.times[i]);
    for (double v : pack(adj.limit_state(i))) out << ',' << format_double(v);
    out << ',' << format_double(adj.sigma_left[i]) << ',' << format_double(adj.mu_cumulative[i]) << ','
        << format_double(adj.hamiltonian[i]) << '\n';
  }
}

AdjointTrajectory read_adjoint_csv(const std::string& path, const CanonicalModel& model, const Trajectory& primal) {
  const int d = StateLayout{model.n}.dim();
  const auto rows = read_csv(path, static_cast<std::size_t>(1 + d + 3), nullptr);
  if (rows.size() != primal.size()) {
    throw ArgumentError("'" + path + "' has " + std::to_string(rows.size()) + " rows, the trajectory " +
                        std::to_string(primal.size()));
  }
  AdjointTrajectory adj;
  adj.n = model.n;
  adj.gamma = primal.gamma;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r[0] != primal.times[i]) throw ArgumentError("'" + path + "': time grid differs from the trajectory");
    adj.times.push_back(r[0]);
    AdjointState a = unpack_adjoint(Eigen::Map<const Vec>(r.data() + 1, d), model.n);
    adj.sigma.push_back(a.sigma);
    const SystemState& s = primal.states[i];
    adj.h_y.push_back(selector(s.y));
    adj.h_w.push_back(selector(s.w));
    if (primal.gamma) a.sigma += *primal.gamma * adj.h_w.back() * std::max(s.y, 0.0) * a.r;
    adj.adjoints.push_back(a);
    adj.sigma_left.push_back(r[static_cast<std::size_t>(1 + d)]);
    adj.mu_cumulative.push_back(r[static_cast<std::size_t>(2 + d)]);
    adj.hamiltonian.push_back(r[static_cast<std::size_t>(3 + d)]);
  }
  return adj;
}

Json to_json(const Vec& v) {
  Json j = Json::array();
  for (double x : v) j.push_back(x);
  return j;
}

Json to_json(const Mat& m) {
  Json j = Json::array();
  for (int i = 0; i < m.rows(); ++i) j.push_back(to_json(Vec(m.row(i).transpose())));
  return j;
}

Json to_json(const SystemState& s) {
  return Json{{"x", to_json(s.x)}, {"y", s.y}, {"v", to_json(s.v)}, {"w", s.w}};
}

Json to_json(const AdjointState& a) {
  return Json{{"q", to_json(a.q)}, {"sigma", a.sigma}, {"p", to_json(a.p)}, {"r", a.r}};
}

AdjointState adjoint_state_from_json(const Json& j, int n) {
  auto vec = [&](const char* key) {
    const std::vector<double> v = j.at(key).get<std::vector<double>>();
    if (static_cast<int>(v.size()) != n) throw ArgumentError(std::string("adjoint '") + key + "' has wrong length");
    return Vec(Eigen::Map<const Vec>(v.data(), n));
  };
  try {
    return {vec("q"), j.at("sigma").get<double>(), vec("p"), j.at("r").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("malformed adjoint terminal condition: ") + e.what());
  }
}

Json to_json(const BangBangControl& c) {
  Json sw = Json::array();
  for (const auto& s : c.switch_times) sw.push_back(s);
  return Json{{"initial", to_json(c.initial)}, {"switch_times", sw}, {"horizon", c.horizon}};
}

Json to_json(const OptimalResult& r) {
  return Json{{"T_opt", r.T_opt},
              {"control", to_json(r.control)},
              {"switches", r.control.total_switches()},
              {"terminal_state", to_json(r.terminal_state)},
              {"terminal_residual", r.terminal_residual},
              {"solver_trace", r.solver_trace}};
}

Json to_json(const PMPReport& r) {
  return Json{{"pass", r.pass},
              {"residual_q", r.residual_q},
              {"residual_p", r.residual_p},
              {"residual_r", r.residual_r},
              {"sigma_defect", r.sigma_defect},
              {"max_condition_violation", r.max_condition_violation},
              {"hamiltonian_drift", r.hamiltonian_drift},
              {"H_bar", r.H_bar},
              {"nontriviality", r.nontriviality},
              {"mu_support_violation", r.mu_support_violation},
              {"degenerate_points", r.degenerate_points},
              {"failures", r.failures}};
}

Json to_json(const ConvergenceReport& r) {
  Json sup = Json::array();
  for (const auto& [g, y] : r.sup_y_by_gamma) sup.push_back(Json{{"gamma", g}, {"max_y", y}});
  return Json{{"certified", r.certified},
              {"sup_y_by_gamma", sup},
              {"layer_exponent", r.layer_exponent_valid ? Json(r.layer_exponent) : Json(nullptr)},
              {"layer_C", r.layer_C},
              {"uniform_xyv_gaps", r.uniform_xyv_gaps},
              {"w_pointwise_gaps", r.w_pointwise_gaps},
              {"nu_weakstar_gaps", r.nu_weakstar_gaps},
              {"xyv_tail_estimate", r.xyv_tail_estimate},
              {"impact_times", r.impact_times},
              {"post_impact_w", r.post_impact_w},
              {"threshold_xyv", r.threshold_xyv},
              {"threshold_nu", r.threshold_nu},
              {"threshold_w", r.threshold_w},
              {"band_factor", r.band_factor},
              {"xyv_ok", r.xyv_ok},
              {"nu_ok", r.nu_ok},
              {"layer_ok", r.layer_ok},
              {"shock_ok", r.shock_ok},
              {"failures", r.failures}};
}

Json to_json(const StableNeighborhood& nb) {
  return Json{{"equilibrium", to_json(nb.lin.z_star)},
              {"u0", to_json(nb.lin.u0)},
              {"A", to_json(nb.lin.A)},
              {"B", to_json(nb.lin.B)},
              {"C", to_json(nb.C)},
              {"V", to_json(nb.V)},
              {"epsilon", nb.epsilon},
              {"rho", nb.rho},
              {"rho_definition", "min of |z|^2 / (2 |V z|) over <z, V z> = epsilon"},
              {"closed_loop_abscissa", nb.closed_loop_abscissa},
              {"lyapunov_residual", nb.lyapunov_residual}};
}

Json trajectory_summary(const Trajectory& traj) {
  Json atoms = Json::array();
  for (const Atom& a : traj.atoms) atoms.push_back(Json{{"time", a.time}, {"mass", a.mass}});
  Json events = Json::array();
  for (const auto& e : traj.events) events.push_back(Json{{"time", e.time}, {"kind", to_string(e.kind)}});
  return Json{{"gamma", traj.gamma ? Json(*traj.gamma) : Json("limit")},
              {"t_final", traj.t_final()},
              {"points", traj.size()},
              {"final_state", to_json(traj.states.back())},
              {"final_nu", traj.nu.back()},
              {"max_y", traj.max_y()},
              {"atoms", atoms},
              {"events", events}};
}

void write_json(const std::string& path, Json j) {
  Json out{{"schema", kSchema}};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "schema") out[it.key()] = it.value();
  }
  std::ofstream f(path);
  if (!f) throw ArgumentError("cannot write '" + path + "'");
  f << out.dump(2) << '\n';
}

Json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ArgumentError("cannot open '" + path + "'");
  try {
    return Json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError("'" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace backlash

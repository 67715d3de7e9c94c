#include "backlash/commands.hpp"

#include "backlash/io.hpp"
#include "backlash/svg.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <ostream>

namespace backlash {

namespace {

namespace fs = std::filesystem;

/// Raised for problems that are the caller's fault; mapped to kExitUsage.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct Announcer {
  std::ostream& out;
  fs::path dir;

  std::string path(const std::string& name) const { return (dir / name).string(); }
  void operator()(const std::string& p) const { out << "OUT " << p << '\n'; }
};

Announcer prepare_output(const RunConfig& cfg, std::ostream& out) {
  std::error_code ec;
  fs::create_directories(cfg.output_dir, ec);
  if (ec) throw UsageError("cannot create output directory '" + cfg.output_dir + "': " + ec.message());
  return {out, fs::path(cfg.output_dir)};
}

Json error_body(const std::exception& e) {
  Json j{{"type", "error"}, {"message", e.what()}};
  if (auto* s = dynamic_cast<const StiffnessFailure*>(&e)) {
    j["type"] = "stiffness_failure";
    j["time"] = s->time();
  } else if (auto* i = dynamic_cast<const IntegrationError*>(&e)) {
    j["type"] = "integration_error";
    j["t_lo"] = i->t_lo();
    j["t_hi"] = i->t_hi();
  } else if (auto* r = dynamic_cast<const ReachabilityError*>(&e)) {
    j["type"] = "reachability_error";
    j["best_residual"] = r->best_residual();
  } else if (dynamic_cast<const StructureError*>(&e)) {
    j["type"] = "structure_error";
  } else if (dynamic_cast<const NotEquilibrium*>(&e)) {
    j["type"] = "not_equilibrium";
  } else if (dynamic_cast<const ControllabilityError*>(&e)) {
    j["type"] = "controllability_error";
  } else if (dynamic_cast<const DegenerateTransversality*>(&e)) {
    j["type"] = "degenerate_transversality";
  }
  return Json{{"schema", kSchema}, {"error", j}};
}

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << error_body(e).dump() << '\n';
    return kExitRuntime;
  }
}

void check_integrator(const RunConfig& cfg) {
  try {
    cfg.integrator.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid 'integrator' section: ") + e.what());
  }
}

void check_gamma(double g) {
  if (!(g > 0.0) || !std::isfinite(g)) throw ConfigError("gamma must be positive");
}

Dynamics dynamics_of(const RunConfig& cfg) {
  if (!cfg.gamma) return Dynamics::limit();
  check_gamma(*cfg.gamma);
  return Dynamics::penalty(*cfg.gamma);
}

SystemState initial_state(const RunConfig& cfg, const CanonicalModel& model, const char* key = "scenario.init") {
  const std::vector<double>& z = std::string(key) == "scenario.init" ? cfg.init : cfg.equilibrium;
  const int d = StateLayout{model.n}.dim();
  if (z.empty()) return unpack(Vec::Zero(d), model.n);
  if (static_cast<int>(z.size()) != d) {
    throw ConfigError("'" + std::string(key) + "' needs " + std::to_string(d) + " entries for model " + cfg.model);
  }
  return unpack(Eigen::Map<const Vec>(z.data(), d), model.n);
}

TargetSpec required_target(const RunConfig& cfg, const CanonicalModel& model) {
  if (!cfg.target) throw ConfigError("missing 'scenario.target'");
  return build_target(*cfg.target, model.n);
}

SolveOptions solve_options(const RunConfig& cfg, const CanonicalModel& model, const TargetSpec& target) {
  if (!(cfg.grid > 0.0)) throw ConfigError("'optimize.grid' must be positive");
  if (cfg.max_switches < 0) throw ConfigError("'optimize.max_switches' must be non-negative");
  SolveOptions o;
  o.oracle.grid = cfg.grid;
  o.oracle.max_switches = cfg.max_switches;
  if (cfg.oracle_delta) {
    if (!(*cfg.oracle_delta > 0.0)) throw ConfigError("'optimize.oracle_delta' must be positive");
    if (target.kind != TargetKind::Point) throw ConfigError("'optimize.oracle_delta' applies to point targets");
    o.oracle_target = TargetSpec::point(unpack(target.center, model.n), *cfg.oracle_delta);
  }
  return o;
}

Trajectory simulate(const CanonicalModel& model, const Dynamics& dyn, const ControlSignal& control, double t_final,
                    const IntegratorConfig& icfg, const SystemState& init) {
  if (dyn.gamma) return integrate_penalty(model, *dyn.gamma, control, t_final, icfg, init);
  return integrate_limit(model, control, t_final, icfg, init);
}

Series column(const std::string& label, const Trajectory& tr, const std::function<double(const SystemState&)>& f) {
  Series s{label, {}, {}};
  for (std::size_t i = 0; i < tr.size(); ++i) {
    if (tr.atom_at(i)) {
      s.x.push_back(tr.times[i]);
      s.y.push_back(f(tr.left_state(i)));
    }
    s.x.push_back(tr.times[i]);
    s.y.push_back(f(tr.states[i]));
  }
  return s;
}

void write_phase_portrait(const std::string& path, const Trajectory& tr, const TargetSpec& target, int n) {
  Series path_yw{"trajectory", {}, {}};
  for (std::size_t i = 0; i < tr.size(); ++i) {
    if (tr.atom_at(i)) {
      const SystemState pre = tr.left_state(i);
      path_yw.x.push_back(pre.y);
      path_yw.y.push_back(pre.w);
    }
    path_yw.x.push_back(tr.states[i].y);
    path_yw.y.push_back(tr.states[i].w);
  }
  const SystemState c = unpack(target.center, n);
  Series wall{"wall y = 0", {0.0, 0.0}, {}};
  double lo = 0, hi = 0;
  for (double w : path_yw.y) {
    lo = std::min(lo, w);
    hi = std::max(hi, w);
  }
  wall.y = {lo, hi};
  Series ends{"start / target", {path_yw.x.front(), c.y}, {path_yw.y.front(), c.w}, true};
  write_svg(path, {path_yw, wall, ends}, {"Phase portrait", "y", "w", false, false, false});
}

}  // namespace

int cmd_simulate(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const CanonicalModel model = build_model(cfg);
    const Dynamics dyn = dynamics_of(cfg);
    check_integrator(cfg);
    if (!(cfg.t_final > 0.0)) throw ConfigError("'scenario.t_final' must be positive");
    const SystemState init = initial_state(cfg, model);
    const ControlSignal control = parse_control(cfg.control, model.box);
    const Announcer announce = prepare_output(cfg, out);

    const Trajectory tr = simulate(model, dyn, control, cfg.t_final, cfg.integrator, init);
    const std::string csv = announce.path("trajectory.csv");
    write_trajectory_csv(csv, tr);
    announce(csv);
    Json j{{"command", "simulate"}, {"model", cfg.model}, {"control", cfg.control}, {"trajectory", trajectory_summary(tr)}};
    const std::string js = announce.path("summary.json");
    write_json(js, j);
    announce(js);
    const std::string sp = announce.path("trajectory.svg");
    write_svg(sp,
              {column("y", tr, [](const SystemState& s) { return s.y; }),
               column("w", tr, [](const SystemState& s) { return s.w; })},
              {"Constrained coordinate", "t", "value", false, false, false});
    announce(sp);
    return int(kExitOk);
  });
}

int cmd_sweep(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const CanonicalModel model = build_model(cfg);
    if (cfg.gammas.size() < 3) throw ConfigError("at least 3 gammas required");
    for (double g : cfg.gammas) check_gamma(g);
    check_integrator(cfg);
    if (!(cfg.t_final > 0.0)) throw ConfigError("'scenario.t_final' must be positive");
    const SystemState init = initial_state(cfg, model);
    const ControlSignal control = parse_control(cfg.control, model.box);
    const Announcer announce = prepare_output(cfg, out);

    const GammaSweep sweep = gamma_sweep(model, control, init, cfg.t_final, cfg.gammas, cfg.integrator);
    const ConvergenceReport rep = certify_backlash(sweep);
    const Trajectory limit = integrate_limit(model, control, cfg.t_final, cfg.integrator, init);

    for (std::size_t k = 0; k < sweep.gammas.size(); ++k) {
      const std::string p = announce.path("sweep_gamma_" + format_double(sweep.gammas[k]) + ".csv");
      write_trajectory_csv(p, sweep.trajectories[k]);
      announce(p);
    }
    const std::string lp = announce.path("sweep_limit.csv");
    write_trajectory_csv(lp, limit);
    announce(lp);

    Json atoms = Json::array();
    const CumulativeMeasure top = extract_measure(sweep.trajectories.back());
    for (const auto& [t, m] : top.atoms) atoms.push_back(Json{{"time", t}, {"mass", m}});
    Json limit_atoms = Json::array();
    for (const Atom& a : limit.atoms) limit_atoms.push_back(Json{{"time", a.time}, {"mass", a.mass}});
    Json j{{"command", "sweep"},
           {"model", cfg.model},
           {"control", cfg.control},
           {"report", to_json(rep)},
           {"largest_gamma_atoms", atoms},
           {"limit_atoms", limit_atoms}};
    const std::string js = announce.path("convergence.json");
    write_json(js, j);
    announce(js);

    Series data{"max y", {}, {}};
    for (const auto& [g, y] : rep.sup_y_by_gamma) {
      data.x.push_back(g);
      data.y.push_back(y);
    }
    std::vector<Series> series{data};
    if (rep.layer_exponent_valid) {
      Series fit{"fit slope " + format_double(std::round(rep.layer_exponent * 1e4) / 1e4), {}, {}};
      for (double g : data.x) {
        fit.x.push_back(g);
        fit.y.push_back(rep.layer_C * std::pow(g, rep.layer_exponent));
      }
      series.push_back(fit);
    }
    const std::string sp = announce.path("layer_scaling.svg");
    write_svg(sp, series, {"Boundary layer depth", "gamma", "max y", true, true, false});
    announce(sp);
    if (!rep.certified) {
      for (const auto& f : rep.failures) err << "FAIL " << f << '\n';
      return int(kExitRuntime);
    }
    return int(kExitOk);
  });
}

int cmd_optimize(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const CanonicalModel model = build_model(cfg);
    const Dynamics dyn = dynamics_of(cfg);
    check_integrator(cfg);
    const SystemState init = initial_state(cfg, model);
    const TargetSpec target = required_target(cfg, model);
    const SolveOptions opts = solve_options(cfg, model, target);
    const Announcer announce = prepare_output(cfg, out);

    const SolveOutcome sol = solve_time_optimal(model, dyn, init, target, opts, cfg.integrator);
    const OptimalResult& best = sol.best;
    const Trajectory tr = simulate(model, dyn, best.control.to_signal(model.box), best.T_opt, cfg.integrator, init);

    Json structures = Json::array();
    for (const auto& [key, r] : sol.per_structure) {
      structures.push_back(Json{{"initial", key.first}, {"switches", key.second}, {"T", r.T_opt}});
    }
    Json j{{"command", "optimize"},
           {"model", cfg.model},
           {"dynamics", dyn.gamma ? Json(*dyn.gamma) : Json("limit")},
           {"result", to_json(best)},
           {"sign_pattern", best.control.sign_pattern(model.box)},
           {"structures", structures},
           {"trajectory", trajectory_summary(tr)}};

    const std::string csv = announce.path("trajectory.csv");
    write_trajectory_csv(csv, tr);
    announce(csv);

    int code = kExitOk;
    if (!dyn.gamma) {
      const AdjointState terminal = terminal_covector(model, tr, target);
      const AdjointTrajectory adj = integrate_adjoint_limit(model, tr, terminal);
      const PMPReport rep = verify_theorem2(model, tr, adj);
      j["pmp"] = to_json(rep);
      const std::string tj = announce.path("adjoint_terminal.json");
      write_json(tj, Json{{"time", best.T_opt}, {"terminal", to_json(terminal)}});
      announce(tj);
      const std::string ac = announce.path("adjoint.csv");
      write_adjoint_csv(ac, adj);
      announce(ac);
    }
    const std::string js = announce.path("optimize.json");
    write_json(js, j);
    announce(js);
    const std::string sp = announce.path("phase.svg");
    write_phase_portrait(sp, tr, target, model.n);
    announce(sp);
    return code;
  });
}

int cmd_verify(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const CanonicalModel model = build_model(cfg);
    if (cfg.gamma) throw ConfigError("'gamma' must be limit for verify");
    check_integrator(cfg);
    if (cfg.trajectory_file.empty()) throw ConfigError("missing 'verify.trajectory'");
    const Trajectory tr = [&] {
      try {
        return read_trajectory_csv(cfg.trajectory_file, model, std::nullopt, cfg.integrator);
      } catch (const ArgumentError& e) {
        throw UsageError(std::string("invalid 'verify.trajectory': ") + e.what());
      }
    }();
    AdjointTrajectory adj;
    std::string source;
    const std::string& af = cfg.adjoint_file;
    if (af.empty()) {
      adj = integrate_adjoint_limit(model, tr, terminal_covector(model, tr, required_target(cfg, model)));
      source = "target";
    } else if (fs::path(af).extension() == ".csv") {
      try {
        adj = read_adjoint_csv(af, model, tr);
      } catch (const ArgumentError& e) {
        throw UsageError(std::string("invalid 'verify.adjoint': ") + e.what());
      }
      source = af;
    } else {
      AdjointState terminal;
      try {
        const Json j = read_json(af);
        terminal = adjoint_state_from_json(j.contains("terminal") ? j.at("terminal") : j, model.n);
      } catch (const ArgumentError& e) {
        throw UsageError(std::string("invalid 'verify.adjoint': ") + e.what());
      }
      adj = integrate_adjoint_limit(model, tr, terminal);
      source = af;
    }
    const Announcer announce = prepare_output(cfg, out);
    const PMPReport rep = verify_theorem2(model, tr, adj);
    const MaxConditionTrace mc = max_condition_residual(model, tr, adj);

    const std::string js = announce.path("verify.json");
    write_json(js, Json{{"command", "verify"},
                        {"model", cfg.model},
                        {"trajectory", cfg.trajectory_file},
                        {"adjoint_source", source},
                        {"report", to_json(rep)},
                        {"max_condition_degenerate_points", mc.degenerate_count}});
    announce(js);

    Series H{"H", adj.times, adj.hamiltonian};
    Series r{"r", adj.times, {}};
    for (const auto& a : adj.adjoints) r.y.push_back(a.r);
    const std::string sp = announce.path("adjoint.svg");
    write_svg(sp, {H, r}, {"Hamiltonian and r", "t", "value", false, false, false});
    announce(sp);

    if (!rep.pass) {
      for (const auto& f : rep.failures) err << "FAIL " << f << '\n';
      return int(kExitRuntime);
    }
    return int(kExitOk);
  });
}

int cmd_stabilize(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const CanonicalModel model = build_model(cfg);
    if (cfg.gamma) throw ConfigError("'gamma' must be limit for stabilize");
    check_integrator(cfg);
    if (cfg.equilibrium.empty()) throw ConfigError("missing 'stabilize.equilibrium'");
    const SystemState eq = initial_state(cfg, model, "stabilize.equilibrium");
    std::optional<Vec> u0;
    if (!cfg.u0.empty()) {
      if (static_cast<int>(cfg.u0.size()) != model.m) {
        throw ConfigError("'stabilize.u0' needs " + std::to_string(model.m) + " value(s)");
      }
      u0 = Eigen::Map<const Vec>(cfg.u0.data(), model.m);
    }
    if (!(cfg.margin > 0.0)) throw ConfigError("'stabilize.margin' must be positive");
    if (!(cfg.epsilon_cap > 0.0)) throw ConfigError("'stabilize.epsilon_cap' must be positive");
    const Announcer announce = prepare_output(cfg, out);

    const StableNeighborhood nb = build_stable_neighborhood(model, eq, u0, cfg.margin, cfg.epsilon_cap);
    const NeighborhoodCheck chk = sample_neighborhood(nb, model.box, 2000, cfg.seed);
    const bool sampled_ok = chk.lyapunov_excess <= 1e-9 && chk.admissibility_excess <= 0.0;
    Json j{{"command", "stabilize"},
           {"model", cfg.model},
           {"neighborhood", to_json(nb)},
           {"rho_eigen_bound", rho_eigen_bound(nb.V, nb.epsilon)},
           {"sampled_checks",
            Json{{"samples", chk.samples},
                 {"seed", cfg.seed},
                 {"lyapunov_excess", chk.lyapunov_excess},
                 {"admissibility_excess", chk.admissibility_excess},
                 {"pass", sampled_ok}}}};
    bool ok = sampled_ok;
    if (!cfg.init.empty()) {
      const SystemState init = initial_state(cfg, model);
      const TargetSpec target = nb.target();
      const NeighborhoodRun run = optimal_run_into(model, nb, init, solve_options(cfg, model, target));
      j["optimal_run"] = Json{{"result", to_json(run.result)},
                              {"pmp", to_json(run.report)},
                              {"H_bar", run.report.H_bar},
                              {"rho", nb.rho},
                              {"rho_satisfied", run.rho_satisfied}};
      ok = ok && run.report.pass && run.rho_satisfied;
      const std::string csv = announce.path("trajectory.csv");
      write_trajectory_csv(csv, run.primal);
      announce(csv);
      const std::string ac = announce.path("adjoint.csv");
      write_adjoint_csv(ac, run.adjoint);
      announce(ac);
      if (!run.report.pass) {
        for (const auto& f : run.report.failures) err << "FAIL " << f << '\n';
      }
      if (!run.rho_satisfied) err << "FAIL H_bar below rho\n";
    }
    const std::string js = announce.path("stabilize.json");
    write_json(js, j);
    announce(js);
    if (!sampled_ok) err << "FAIL sampled neighborhood checks\n";
    return ok ? int(kExitOk) : int(kExitRuntime);
  });
}

}  // namespace backlash

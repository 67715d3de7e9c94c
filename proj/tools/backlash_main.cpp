#include "backlash/commands.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

using namespace backlash;

namespace {

struct Flags {
  std::string config;
  std::string model;
  std::string gamma;
  std::string gammas;
  std::string control;
  std::string init;
  double t_final = 0.0;
  std::string out;
  std::string target;
  double delta = 0.0;
  std::string equilibrium;
  std::string u0;
  double margin = 0.0;
  double epsilon_cap = 0.0;
  double grid = 0.0;
  int max_switches = 0;
  double oracle_delta = 0.0;
  std::string trajectory;
  std::string adjoint;
  double rel_tol = 0.0;
  double abs_tol = 0.0;
  std::uint64_t seed = 0;
  bool print_config = false;
};

std::vector<double> numbers(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("invalid number '" + item + "' in " + flag);
    }
  }
  return out;
}

void add_options(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "YAML run configuration");
  sub->add_option("--model", f.model, "Model identifier: ex1 or ex2");
  sub->add_option("--gamma", f.gamma, "Penalty stiffness, or 'limit'");
  sub->add_option("--gammas", f.gammas, "Comma separated stiffness list for sweeps");
  sub->add_option("--u", f.control, "Control: const:u or bang:u0/t1,t2,...");
  sub->add_option("--init", f.init, "Initial state, e.g. \"y=-1,w=0\"");
  sub->add_option("--tf", f.t_final, "Final time");
  sub->add_option("--out", f.out, "Output directory");
  sub->add_option("--target", f.target, "Point target, e.g. \"y=-1,w=0\"");
  sub->add_option("--delta", f.delta, "Radius of the point target");
  sub->add_option("--equilibrium", f.equilibrium, "Equilibrium state for stabilize");
  sub->add_option("--u0", f.u0, "Equilibrium control for stabilize");
  sub->add_option("--margin", f.margin, "Closed-loop decay margin");
  sub->add_option("--epsilon-cap", f.epsilon_cap, "Largest level of the stable neighborhood");
  sub->add_option("--grid", f.grid, "Switch-time grid of the brute-force search");
  sub->add_option("--max-switches", f.max_switches, "Largest number of switches searched");
  sub->add_option("--oracle-delta", f.oracle_delta, "Target radius used by the brute-force search");
  sub->add_option("--trajectory", f.trajectory, "Trajectory CSV to verify");
  sub->add_option("--adjoint", f.adjoint, "Adjoint terminal JSON or adjoint CSV");
  sub->add_option("--rel-tol", f.rel_tol, "Integrator relative tolerance");
  sub->add_option("--abs-tol", f.abs_tol, "Integrator absolute tolerance");
  sub->add_option("--seed", f.seed, "Seed for sampled checks");
  sub->add_flag("--print-config", f.print_config, "Print the effective configuration as YAML");
}

bool given(const CLI::App* sub, const char* name) { return sub->count(name) > 0; }

RunConfig effective_config(const CLI::App* sub, const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
  if (given(sub, "--model")) c.model = f.model;
  if (given(sub, "--gamma")) {
    if (f.gamma == "limit") {
      c.gamma.reset();
    } else {
      const std::vector<double> g = numbers(f.gamma, "--gamma");
      if (g.size() != 1) throw ConfigError("--gamma takes one value");
      c.gamma = g[0];
    }
  }
  if (given(sub, "--gammas")) c.gammas = numbers(f.gammas, "--gammas");
  if (given(sub, "--u")) c.control = f.control;
  if (given(sub, "--tf")) c.t_final = f.t_final;
  if (given(sub, "--out")) c.output_dir = f.out;
  if (given(sub, "--margin")) c.margin = f.margin;
  if (given(sub, "--epsilon-cap")) c.epsilon_cap = f.epsilon_cap;
  if (given(sub, "--grid")) c.grid = f.grid;
  if (given(sub, "--max-switches")) c.max_switches = f.max_switches;
  if (given(sub, "--oracle-delta")) c.oracle_delta = f.oracle_delta;
  if (given(sub, "--trajectory")) c.trajectory_file = f.trajectory;
  if (given(sub, "--adjoint")) c.adjoint_file = f.adjoint;
  if (given(sub, "--rel-tol")) c.integrator.rel_tol = f.rel_tol;
  if (given(sub, "--abs-tol")) c.integrator.abs_tol = f.abs_tol;
  if (given(sub, "--seed")) c.seed = f.seed;
  if (given(sub, "--u0")) c.u0 = numbers(f.u0, "--u0");

  const bool needs_n = given(sub, "--init") || given(sub, "--target") || given(sub, "--equilibrium");
  if (needs_n) {
    const int n = build_model(c).n;
    if (given(sub, "--init")) c.init = parse_state_assignments(f.init, n);
    if (given(sub, "--equilibrium")) c.equilibrium = parse_state_assignments(f.equilibrium, n);
    if (given(sub, "--target")) {
      TargetConfig t;
      t.center = parse_state_assignments(f.target, n);
      c.target = t;
    }
  }
  if (given(sub, "--delta")) {
    if (!c.target) throw ConfigError("--delta needs a target");
    c.target->delta = f.delta;
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Time-optimal control of mechanical systems with a one-sided position constraint"};
  app.require_subcommand(1);
  Flags flags;
  using Command = int (*)(const RunConfig&, std::ostream&, std::ostream&);
  const std::vector<std::tuple<const char*, const char*, Command>> commands{
      {"simulate", "Integrate one trajectory and write CSV, JSON and SVG", cmd_simulate},
      {"sweep", "Penalty sweep over gamma with convergence certification", cmd_sweep},
      {"optimize", "Time-optimal bang-bang control to a target", cmd_optimize},
      {"verify", "Check the necessary conditions on a trajectory and adjoint", cmd_verify},
      {"stabilize", "Stable neighborhood of an equilibrium and an optimal run into it", cmd_stabilize},
  };
  std::vector<std::pair<CLI::App*, Command>> subs;
  for (const auto& [name, help, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_options(sub, flags);
    subs.emplace_back(sub, fn);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  for (const auto& [sub, fn] : subs) {
    if (!sub->parsed()) continue;
    RunConfig cfg;
    try {
      cfg = effective_config(sub, flags);
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitUsage;
    }
    if (flags.print_config) {
      std::cout << to_yaml(cfg);
      return kExitOk;
    }
    return fn(cfg, std::cout, std::cerr);
  }
  return kExitUsage;
}

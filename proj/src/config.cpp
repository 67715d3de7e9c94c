#include "backlash/config.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace backlash {

namespace {

void check_keys(const YAML::Node& node, const std::string& where, const std::set<std::string>& allowed) {
  if (!node.IsMap()) throw ConfigError("'" + where + "' must be a mapping");
  for (const auto& kv : node) {
    const std::string key = kv.first.as<std::string>();
    if (!allowed.contains(key)) {
      throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

template <typename T>
T get(const YAML::Node& node, const std::string& key) {
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("invalid value for '" + key + "'");
  }
}

template <typename T>
void read(const YAML::Node& parent, const char* name, const std::string& key, T& out) {
  if (const YAML::Node n = parent[name]) out = get<T>(n, key);
}

std::string join(const std::string& a, const char* b) { return a.empty() ? b : a + "." + b; }

TargetConfig read_target(const YAML::Node& n, const std::string& where) {
  check_keys(n, where, {"kind", "center", "delta", "V", "epsilon"});
  TargetConfig t;
  read(n, "kind", join(where, "kind"), t.kind);
  read(n, "center", join(where, "center"), t.center);
  read(n, "delta", join(where, "delta"), t.delta);
  read(n, "V", join(where, "V"), t.V);
  read(n, "epsilon", join(where, "epsilon"), t.epsilon);
  if (t.kind != "point" && t.kind != "ellipsoid") {
    throw ConfigError("invalid value for '" + join(where, "kind") + "' (expected point or ellipsoid)");
  }
  return t;
}

RunConfig from_node(const YAML::Node& root) {
  RunConfig c;
  if (!root || root.IsNull()) return c;
  check_keys(root, "", {"model", "scenario", "gamma", "gammas", "stabilize", "optimize", "verify", "integrator",
                        "output", "seed"});
  if (const YAML::Node m = root["model"]) {
    check_keys(m, "model", {"id", "params"});
    read(m, "id", "model.id", c.model);
    if (const YAML::Node p = m["params"]) {
      check_keys(p, "model.params", {"mass_M", "k", "alpha", "beta"});
      read(p, "mass_M", "model.params.mass_M", c.params.mass_M);
      read(p, "k", "model.params.k", c.params.k);
      read(p, "alpha", "model.params.alpha", c.params.alpha);
      read(p, "beta", "model.params.beta", c.params.beta);
    }
  }
  if (const YAML::Node s = root["scenario"]) {
    check_keys(s, "scenario", {"init", "control", "t_final", "target"});
    read(s, "init", "scenario.init", c.init);
    read(s, "control", "scenario.control", c.control);
    read(s, "t_final", "scenario.t_final", c.t_final);
    if (const YAML::Node t = s["target"]) c.target = read_target(t, "scenario.target");
  }
  if (const YAML::Node g = root["gamma"]) {
    if (g.IsScalar() && g.Scalar() == "limit") {
      c.gamma.reset();
    } else {
      c.gamma = get<double>(g, "gamma");
    }
  }
  read(root, "gammas", "gammas", c.gammas);
  if (const YAML::Node s = root["stabilize"]) {
    check_keys(s, "stabilize", {"equilibrium", "u0", "margin", "epsilon_cap"});
    read(s, "equilibrium", "stabilize.equilibrium", c.equilibrium);
    read(s, "u0", "stabilize.u0", c.u0);
    read(s, "margin", "stabilize.margin", c.margin);
    read(s, "epsilon_cap", "stabilize.epsilon_cap", c.epsilon_cap);
  }
  if (const YAML::Node o = root["optimize"]) {
    check_keys(o, "optimize", {"grid", "max_switches", "oracle_delta"});
    read(o, "grid", "optimize.grid", c.grid);
    read(o, "max_switches", "optimize.max_switches", c.max_switches);
    if (const YAML::Node d = o["oracle_delta"]) c.oracle_delta = get<double>(d, "optimize.oracle_delta");
  }
  if (const YAML::Node v = root["verify"]) {
    check_keys(v, "verify", {"trajectory", "adjoint"});
    read(v, "trajectory", "verify.trajectory", c.trajectory_file);
    read(v, "adjoint", "verify.adjoint", c.adjoint_file);
  }
  if (const YAML::Node i = root["integrator"]) {
    check_keys(i, "integrator", {"rel_tol", "abs_tol", "dt_max", "contact_band", "gamma_step_cap"});
    read(i, "rel_tol", "integrator.rel_tol", c.integrator.rel_tol);
    read(i, "abs_tol", "integrator.abs_tol", c.integrator.abs_tol);
    read(i, "dt_max", "integrator.dt_max", c.integrator.dt_max);
    read(i, "contact_band", "integrator.contact_band", c.integrator.contact_band);
    read(i, "gamma_step_cap", "integrator.gamma_step_cap", c.integrator.gamma_step_cap);
  }
  if (const YAML::Node o = root["output"]) {
    check_keys(o, "output", {"dir"});
    read(o, "dir", "output.dir", c.output_dir);
  }
  read(root, "seed", "seed", c.seed);
  return c;
}

void emit_list(YAML::Emitter& e, const std::vector<double>& v) {
  e << YAML::Flow << YAML::BeginSeq;
  for (double x : v) e << x;
  e << YAML::EndSeq;
}

}  // namespace

RunConfig parse_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  return from_node(root);
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_yaml(const RunConfig& c) {
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "id" << YAML::Value << c.model;
  e << YAML::Key << "params" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "mass_M" << YAML::Value << c.params.mass_M;
  e << YAML::Key << "k" << YAML::Value << c.params.k;
  e << YAML::Key << "alpha" << YAML::Value << c.params.alpha;
  e << YAML::Key << "beta" << YAML::Value << c.params.beta;
  e << YAML::EndMap << YAML::EndMap;

  e << YAML::Key << "scenario" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "init" << YAML::Value;
  emit_list(e, c.init);
  e << YAML::Key << "control" << YAML::Value << c.control;
  e << YAML::Key << "t_final" << YAML::Value << c.t_final;
  if (c.target) {
    e << YAML::Key << "target" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "kind" << YAML::Value << c.target->kind;
    e << YAML::Key << "center" << YAML::Value;
    emit_list(e, c.target->center);
    e << YAML::Key << "delta" << YAML::Value << c.target->delta;
    e << YAML::Key << "V" << YAML::Value;
    emit_list(e, c.target->V);
    e << YAML::Key << "epsilon" << YAML::Value << c.target->epsilon;
    e << YAML::EndMap;
  }
  e << YAML::EndMap;

  e << YAML::Key << "gamma" << YAML::Value;
  if (c.gamma) {
    e << *c.gamma;
  } else {
    e << "limit";
  }
  e << YAML::Key << "gammas" << YAML::Value;
  emit_list(e, c.gammas);

  e << YAML::Key << "stabilize" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "equilibrium" << YAML::Value;
  emit_list(e, c.equilibrium);
  e << YAML::Key << "u0" << YAML::Value;
  emit_list(e, c.u0);
  e << YAML::Key << "margin" << YAML::Value << c.margin;
  e << YAML::Key << "epsilon_cap" << YAML::Value << c.epsilon_cap;
  e << YAML::EndMap;

  e << YAML::Key << "optimize" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "grid" << YAML::Value << c.grid;
  e << YAML::Key << "max_switches" << YAML::Value << c.max_switches;
  if (c.oracle_delta) e << YAML::Key << "oracle_delta" << YAML::Value << *c.oracle_delta;
  e << YAML::EndMap;

  e << YAML::Key << "verify" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "trajectory" << YAML::Value << YAML::DoubleQuoted << c.trajectory_file;
  e << YAML::Key << "adjoint" << YAML::Value << YAML::DoubleQuoted << c.adjoint_file;
  e << YAML::EndMap;

  e << YAML::Key << "integrator" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "rel_tol" << YAML::Value << c.integrator.rel_tol;
  e << YAML::Key << "abs_tol" << YAML::Value << c.integrator.abs_tol;
  e << YAML::Key << "dt_max" << YAML::Value << c.integrator.dt_max;
  e << YAML::Key << "contact_band" << YAML::Value << c.integrator.contact_band;
  e << YAML::Key << "gamma_step_cap" << YAML::Value << c.integrator.gamma_step_cap;
  e << YAML::EndMap;

  e << YAML::Key << "output" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "dir" << YAML::Value << YAML::DoubleQuoted << c.output_dir;
  e << YAML::EndMap;
  e << YAML::Key << "seed" << YAML::Value << c.seed;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

CanonicalModel build_model(const RunConfig& cfg) {
  if (cfg.model != "ex1" && cfg.model != "ex2") {
    throw ConfigError("invalid value for 'model.id' (expected ex1 or ex2)");
  }
  try {
    return model_from_id(cfg.model, cfg.params.mass_M, cfg.params.k, cfg.params.alpha, cfg.params.beta);
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("invalid 'model.params': ") + e.what());
  }
}

std::vector<double> parse_state_assignments(const std::string& text, int n) {
  const StateLayout L{n};
  std::vector<double> z(static_cast<std::size_t>(L.dim()), 0.0);
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("state entry '" + item + "' is not of the form key=value");
    const std::string key = item.substr(0, eq);
    double value = 0.0;
    try {
      std::size_t used = 0;
      value = std::stod(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw ConfigError("state entry '" + item + "' has no numeric value");
    }
    int index = -1;
    if (key == "y") index = L.y();
    if (key == "w") index = L.w();
    if ((key == "x" || key == "v") && n == 1) index = key == "x" ? L.x() : L.v();
    if ((key[0] == 'x' || key[0] == 'v') && key.size() > 1 && index < 0) {
      try {
        const int k = std::stoi(key.substr(1));
        if (k >= 1 && k <= n) index = (key[0] == 'x' ? L.x() : L.v()) + k - 1;
      } catch (const std::exception&) {
      }
    }
    if (index < 0) throw ConfigError("unknown state component '" + key + "' for n = " + std::to_string(n));
    z[static_cast<std::size_t>(index)] = value;
  }
  return z;
}

namespace {

std::vector<double> number_list(const std::string& text, const std::string& what) {
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
      throw ConfigError("invalid number '" + item + "' in " + what);
    }
  }
  return out;
}

}  // namespace

ControlSignal parse_control(const std::string& spec, const ControlBox& box) {
  if (spec.rfind("const:", 0) == 0) {
    const std::vector<double> u = number_list(spec.substr(6), "'scenario.control'");
    if (static_cast<int>(u.size()) != box.dim()) {
      throw ConfigError("'scenario.control' needs " + std::to_string(box.dim()) + " value(s)");
    }
    const Vec v = Eigen::Map<const Vec>(u.data(), static_cast<long>(u.size()));
    if (!box.contains(v)) throw ConfigError("'scenario.control' value outside the control box");
    return ControlSignal(v);
  }
  if (spec.rfind("bang:", 0) == 0) {
    const BangBangControl c = parse_bang_bang(spec, 1.0);
    try {
      BangBangControl wide = c;
      wide.horizon = std::numeric_limits<double>::infinity();
      return wide.to_signal(box);
    } catch (const ContractViolation& e) {
      throw ConfigError(std::string("invalid 'scenario.control': ") + e.what());
    }
  }
  throw ConfigError("invalid value for 'scenario.control' (expected const:... or bang:...)");
}

BangBangControl parse_bang_bang(const std::string& spec, double horizon) {
  if (spec.rfind("bang:", 0) != 0) throw ConfigError("invalid value for 'scenario.control' (expected bang:...)");
  const std::string body = spec.substr(5);
  const auto slash = body.find('/');
  const std::vector<double> u0 = number_list(body.substr(0, slash), "'scenario.control'");
  if (u0.size() != 1) throw ConfigError("'scenario.control' bang: needs one initial value");
  std::vector<double> switches;
  if (slash != std::string::npos) switches = number_list(body.substr(slash + 1), "'scenario.control'");
  return BangBangControl::single_channel(u0[0], switches, horizon);
}

TargetSpec build_target(const TargetConfig& tc, int n) {
  const int d = StateLayout{n}.dim();
  if (static_cast<int>(tc.center.size()) != d) {
    throw ConfigError("'scenario.target.center' needs " + std::to_string(d) + " entries");
  }
  const Vec center = Eigen::Map<const Vec>(tc.center.data(), d);
  try {
    if (tc.kind == "point") {
      TargetSpec t = TargetSpec::point(unpack(center, n), tc.delta);
      t.validate(n);
      return t;
    }
    if (static_cast<int>(tc.V.size()) != d * d) {
      throw ConfigError("'scenario.target.V' needs " + std::to_string(d * d) + " entries");
    }
    const Mat V = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        tc.V.data(), d, d);
    TargetSpec t = TargetSpec::ellipsoid(center, V, tc.epsilon);
    t.validate(n);
    return t;
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("invalid 'scenario.target': ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("invalid 'scenario.target': ") + e.what());
  }
}

}  // namespace backlash

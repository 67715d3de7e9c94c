#include "backlash/optimal.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <mutex>
#include <thread>
#include <sstream>

namespace backlash {

namespace {

constexpr double kReachTol = 1e-8;
constexpr int kScanSamples = 16;
constexpr double kGolden = 0.6180339887498949;

struct Bracket {
  double lo = 0.0;
  double hi = 0.0;
};

Trajectory seed(const Integrator& integ, const FlowPoint& p, const ControlSignal& control) {
  const int n = integ.model().n;
  const Vec& u = control.value(p.t);
  IntervalMode mode = IntervalMode::Free;
  if (p.mode == ContactMode::Contact) {
    mode = IntervalMode::Contact;
  } else if (!integ.dynamics().is_limit()) {
    mode = integ.penalty_regime(p.z, u);
  }
  const Vec r = integ.rhs(p.z, u, mode);
  Trajectory tr;
  tr.n = n;
  tr.gamma = integ.dynamics().gamma;
  tr.times.push_back(p.t);
  tr.states.push_back(p.state(n));
  tr.controls.push_back(u);
  tr.nu.push_back(p.nu(n));
  tr.rate_left.push_back(r);
  tr.rate_right.push_back(r);
  return tr;
}

/// Candidate entry brackets of the target along a recorded piece, in time order.
std::vector<Bracket> scan(const Trajectory& piece, const TargetSpec& target, double& closest) {
  std::vector<Bracket> out;
  const double tol = target.residual_tolerance();
  auto excess = [&](const SystemState& s) { return target.residual(pack(s)) - tol; };
  for (std::size_t i = 0; i + 1 < piece.size(); ++i) {
    const double t0 = piece.times[i];
    const double h = piece.times[i + 1] - t0;
    double prev_t = t0;
    double min_ex = excess(piece.states[i]);
    double min_t = t0;
    bool found = false;
    for (int s = 1; s <= kScanSamples && !found; ++s) {
      const double t = t0 + h * s / kScanSamples;
      const SystemState st = (s == kScanSamples) ? piece.left_state(i + 1) : piece.sample(t).state;
      const double ex = excess(st);
      if (ex <= 0.0) {
        out.push_back({prev_t, t});
        found = true;
      }
      if (ex < min_ex) {
        min_ex = ex;
        min_t = t;
      }
      prev_t = t;
    }
    if (!found && piece.atom_at(i + 1) && excess(piece.states[i + 1]) <= 0.0) {
      // Entered through an impact.
      out.push_back({piece.times[i + 1] - 1e-3 * h, piece.times[i + 1]});
      found = true;
    }
    if (!found) {
      // A pass between two samples can only be missed if the residual can drop by
      // min_ex over one sample spacing.
      double speed = 0.0;
      const int d = StateLayout{piece.n}.dim();
      speed = std::max(piece.rate_right[i].head(d).norm(), piece.rate_left[i + 1].head(d).norm());
      if (target.kind == TargetKind::Ellipsoid) speed *= std::sqrt(target.V.norm());
      const double spacing = h / kScanSamples;
      if (min_ex < 2.0 * speed * spacing) {
        double a = std::max(t0, min_t - spacing);
        double b = std::min(t0 + h, min_t + spacing);
        auto f = [&](double t) { return excess(piece.sample(t).state); };
        double c = b - kGolden * (b - a), e = a + kGolden * (b - a);
        double fc = f(c), fe = f(e);
        for (int it = 0; it < 40; ++it) {
          if (fc < fe) {
            b = e;
            e = c;
            fe = fc;
            c = b - kGolden * (b - a);
            fc = f(c);
          } else {
            a = c;
            c = e;
            fc = fe;
            e = a + kGolden * (b - a);
            fe = f(e);
          }
        }
        const double t_min = fc < fe ? c : e;
        const double f_min = std::min(fc, fe);
        min_ex = std::min(min_ex, f_min);
        if (f_min <= 0.0) {
          out.push_back({std::max(t0, min_t - spacing), t_min});
          found = true;
        }
      }
    }
    closest = std::min(closest, min_ex);
    if (found) continue;
  }
  return out;
}

/// Confirms a bracket with exact integration from start and bisects the entry time.
std::optional<std::pair<double, FlowPoint>> locate(const Integrator& integ, const FlowPoint& start,
                                                   const ControlSignal& control,
                                                   const TargetSpec& target, Bracket br) {
  auto state_at = [&](double t) {
    FlowPoint q = start;
    integ.advance(q, t, control, nullptr);
    return q;
  };
  FlowPoint qhi = state_at(br.hi);
  if (!target.contains(qhi.z.head(StateLayout{integ.model().n}.dim()))) return std::nullopt;
  double lo = std::max(br.lo, start.t), hi = br.hi;
  if (lo >= hi) return std::make_pair(hi, qhi);
  {
    const FlowPoint qlo = state_at(lo);
    if (target.contains(qlo.z.head(StateLayout{integ.model().n}.dim()))) {
      // Bracket too tight on the left; fall back to the segment start.
      lo = start.t;
      hi = qlo.t;
      qhi = qlo;
    }
  }
  while (hi - lo > kReachTol) {
    const double mid = 0.5 * (lo + hi);
    FlowPoint q = state_at(mid);
    if (target.contains(q.z.head(StateLayout{integ.model().n}.dim()))) {
      hi = mid;
      qhi = std::move(q);
    } else {
      lo = mid;
    }
  }
  return std::make_pair(hi, qhi);
}

/// Advances p to t_end under control; returns the first entry into the target, if any.
std::optional<std::pair<double, FlowPoint>> advance_and_check(const Integrator& integ, FlowPoint& p,
                                                              double t_end,
                                                              const ControlSignal& control,
                                                              const TargetSpec& target,
                                                              double& closest) {
  const FlowPoint start = p;
  Trajectory piece = seed(integ, start, control);
  integ.advance(p, t_end, control, &piece);
  for (const Bracket& br : scan(piece, target, closest)) {
    if (auto hit = locate(integ, start, control, target, br)) return hit;
  }
  return std::nullopt;
}

struct Candidate {
  double T = std::numeric_limits<double>::infinity();
  int k = 0;
  std::vector<double> switches;
  double u0 = 0.0;
  bool valid = false;
};

bool better(const Candidate& a, const Candidate& b) {
  if (!b.valid) return a.valid;
  if (!a.valid) return false;
  if (a.T < b.T - 1e-12) return true;
  if (a.T > b.T + 1e-12) return false;
  if (a.k != b.k) return a.k < b.k;
  if (a.switches != b.switches) return a.switches < b.switches;
  return a.u0 < b.u0;
}

struct OracleCtx {
  const Integrator* integ = nullptr;
  const TargetSpec* target = nullptr;
  double lo = -1.0, hi = 1.0;
  double grid = 0.05;
  double cap = 1.0;
  int max_switches = 3;
};

struct TaskResult {
  std::map<int, Candidate> by_k;
  double closest = std::numeric_limits<double>::infinity();

  double prune_time(int k, int max_k) const {
    double t = 0.0;
    for (int kk = k; kk <= max_k; ++kk) {
      const auto it = by_k.find(kk);
      if (it == by_k.end()) return std::numeric_limits<double>::infinity();
      t = std::max(t, it->second.T);
    }
    return t;
  }
  void offer(const Candidate& c) {
    Candidate& cur = by_k[c.k];
    if (better(c, cur)) cur = c;
  }
};

void explore(const OracleCtx& ctx, FlowPoint p, double u, int k, std::vector<double>& sw, double u0,
             long j_start, TaskResult& res) {
  const double other = (u == ctx.lo) ? ctx.hi : ctx.lo;
  for (long j = j_start;; ++j) {
    const double t = static_cast<double>(j) * ctx.grid;
    if (t >= ctx.cap - 1e-12) return;
    if (t > res.prune_time(k, ctx.max_switches) + 1e-12) return;
    if (k < ctx.max_switches && j > j_start) {
      sw.push_back(t);
      explore(ctx, p, other, k + 1, sw, u0, j, res);
      sw.pop_back();
    }
    const double t_next = std::min(static_cast<double>(j + 1) * ctx.grid, ctx.cap);
    const ControlSignal cs(Vec::Constant(1, u));
    if (auto hit = advance_and_check(*ctx.integ, p, t_next, cs, *ctx.target, res.closest)) {
      Candidate c;
      c.T = hit->first;
      c.k = k;
      c.switches = sw;
      c.u0 = u0;
      c.valid = true;
      res.offer(c);
      return;
    }
  }
}

/// One oracle task: fixed initial value and either no switch (j1 < 0) or a first switch at j1.
TaskResult oracle_task(const OracleCtx& ctx, const FlowPoint& p0, double u0, long j1) {
  TaskResult res;
  std::vector<double> sw;
  if (j1 < 0) {
    OracleCtx c0 = ctx;
    c0.max_switches = 0;
    explore(c0, p0, u0, 0, sw, u0, 0, res);
    return res;
  }
  FlowPoint p = p0;
  const ControlSignal cs(Vec::Constant(1, u0));
  for (long j = 0; j < j1; ++j) {
    const double t_next = static_cast<double>(j + 1) * ctx.grid;
    // A hit before the first switch belongs to the no-switch task.
    if (advance_and_check(*ctx.integ, p, t_next, cs, *ctx.target, res.closest)) return res;
  }
  sw.push_back(static_cast<double>(j1) * ctx.grid);
  explore(ctx, p, (u0 == ctx.lo) ? ctx.hi : ctx.lo, 1, sw, u0, j1, res);
  return res;
}

OptimalResult to_result(const CanonicalModel& model, const Candidate& c, const SystemState& terminal,
                        const TargetSpec& target) {
  OptimalResult r;
  r.control = BangBangControl::single_channel(c.u0, c.switches, c.T);
  r.control.initial = Vec::Constant(model.m, c.u0);
  r.T_opt = c.T;
  r.terminal_state = terminal;
  const Vec dz = pack(terminal) - target.center;
  r.terminal_residual = target.kind == TargetKind::Point ? dz.norm() : dz.dot(target.V * dz);
  return r;
}

double terminal_residual(const TargetSpec& target, const SystemState& s) {
  const Vec dz = pack(s) - target.center;
  return target.kind == TargetKind::Point ? dz.norm() : dz.dot(target.V * dz);
}

std::string fmt_switches(const std::vector<double>& sw) {
  std::ostringstream os;
  os.precision(12);
  os << "[";
  for (std::size_t i = 0; i < sw.size(); ++i) os << (i ? ", " : "") << sw[i];
  os << "]";
  return os.str();
}

}  // namespace

TargetSpec TargetSpec::point(const SystemState& s, double delta) {
  TargetSpec t;
  t.kind = TargetKind::Point;
  t.center = pack(s);
  t.delta = delta;
  return t;
}

TargetSpec TargetSpec::ellipsoid(Vec center, Mat V, double epsilon) {
  TargetSpec t;
  t.kind = TargetKind::Ellipsoid;
  t.center = std::move(center);
  t.V = std::move(V);
  t.epsilon = epsilon;
  return t;
}

void TargetSpec::validate(int n) const {
  const int d = StateLayout{n}.dim();
  if (center.size() != d) throw ContractViolation("target center has wrong dimension");
  if (kind == TargetKind::Point) {
    if (!(center[StateLayout{n}.y()] < 0.0)) throw ContractViolation("point target requires y1 < 0");
    if (!(delta > 0.0)) throw ContractViolation("target tolerance must be positive");
    return;
  }
  if (V.rows() != d || V.cols() != d) throw ContractViolation("target V has wrong dimension");
  if ((V - V.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + V.cwiseAbs().maxCoeff())) {
    throw ContractViolation("target V must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(V);
  if (!(es.eigenvalues().minCoeff() > 0.0)) throw ContractViolation("target V must be positive definite");
  if (!(epsilon > 0.0)) throw ContractViolation("target epsilon must be positive");
}

double TargetSpec::value(const Vec& z) const {
  const Vec dz = z.head(center.size()) - center;
  if (kind == TargetKind::Point) return dz.norm() - delta;
  return dz.dot(V * dz) - epsilon;
}

double TargetSpec::residual(const Vec& z) const {
  const Vec dz = z.head(center.size()) - center;
  if (kind == TargetKind::Point) return dz.norm();
  return std::sqrt(std::max(0.0, dz.dot(V * dz)));
}

double TargetSpec::residual_tolerance() const {
  return kind == TargetKind::Point ? delta : std::sqrt(epsilon);
}

double default_horizon(const SystemState& init, const TargetSpec& target) {
  return 10.0 * (1.0 + (pack(init) - target.center).norm());
}

ReachResult first_hit(const CanonicalModel& model, const Dynamics& dyn, const ControlSignal& control,
                      const SystemState& init, const TargetSpec& target, double T_max,
                      const IntegratorConfig& cfg) {
  target.validate(model.n);
  const Integrator integ(model, dyn, cfg);
  FlowPoint p = integ.initial_point(init);
  ReachResult out;
  out.closest = target.residual(pack(init)) - target.residual_tolerance();
  if (target.contains(pack(init))) {
    out.hit = true;
    out.T = 0.0;
    out.terminal_state = init;
    return out;
  }
  const double chunk = std::max(cfg.dt_max, 0.5);
  while (p.t < T_max) {
    const double t_next = std::min(T_max, p.t + chunk);
    if (auto hit = advance_and_check(integ, p, t_next, control, target, out.closest)) {
      out.hit = true;
      out.T = hit->first;
      out.terminal_state = hit->second.state(model.n);
      out.closest = std::min(out.closest, target.residual(pack(out.terminal_state)) - target.residual_tolerance());
      return out;
    }
  }
  out.terminal_state = p.state(model.n);
  return out;
}

double reach_time_bisection(const CanonicalModel& model, const Dynamics& dyn,
                            const BangBangControl& shape, const SystemState& init,
                            const TargetSpec& target, const IntegratorConfig& cfg) {
  const ReachResult r = first_hit(model, dyn, shape.to_signal(model.box), init, target, shape.horizon, cfg);
  if (!r.hit) throw ReachabilityError("target not reached within the horizon", r.closest);
  return r.T;
}

OracleOutcome brute_force_oracle(const CanonicalModel& model, const Dynamics& dyn,
                                 const SystemState& init, const TargetSpec& target,
                                 const OracleOptions& opts, const IntegratorConfig& cfg) {
  if (model.m != 1) throw ContractViolation("the brute-force oracle supports a single control channel");
  if (opts.max_switches < 0 || opts.max_switches > 3) throw ArgumentError("max_switches must be in [0, 3]");
  if (!(opts.grid > 0.0)) throw ArgumentError("oracle grid must be positive");
  target.validate(model.n);
  const Integrator integ(model, dyn, cfg);
  const FlowPoint p0 = integ.initial_point(init);
  const double T_max = opts.T_max.value_or(default_horizon(init, target));

  OracleOutcome out;
  if (target.contains(pack(init))) {
    Candidate c;
    c.T = 0.0;
    c.u0 = model.box.lo[0];
    c.valid = true;
    out.best = to_result(model, c, init, target);
    out.best.solver_trace.push_back("oracle: initial state already inside the target");
    out.per_structure[{c.u0, 0}] = out.best;
    return out;
  }

  OracleCtx ctx;
  ctx.integ = &integ;
  ctx.target = &target;
  ctx.lo = model.box.lo[0];
  ctx.hi = model.box.hi[0];
  ctx.grid = opts.grid;
  ctx.max_switches = opts.max_switches;

  std::map<StructureKey, Candidate> found;
  double closest = std::numeric_limits<double>::infinity();
  double cap = std::min(T_max, std::max(8.0 * opts.grid, T_max / 16.0));
  bool final_pass = false;
  while (true) {
    ctx.cap = cap;
    const long n_cells = static_cast<long>(std::ceil(cap / opts.grid - 1e-9));
    std::vector<std::pair<double, long>> specs;
    for (double u0 : {ctx.lo, ctx.hi}) {
      specs.emplace_back(u0, -1L);
      if (opts.max_switches > 0) {
        for (long j1 = 1; j1 < n_cells; ++j1) specs.emplace_back(u0, j1);
      }
    }
    std::vector<TaskResult> results(specs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < specs.size(); i = next++) {
        results[i] = oracle_task(ctx, p0, specs[i].first, specs[i].second);
      }
    };
    const unsigned n_workers = std::max(1u, std::min(std::thread::hardware_concurrency(), 16u));
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (unsigned w = 0; w < n_workers; ++w) {
      pool.emplace_back([&] {
        try {
          worker();
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = specs.size();
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    found.clear();
    // Deterministic reduction in task order.
    for (const TaskResult& r : results) {
      closest = std::min(closest, r.closest);
      for (const auto& [k, c] : r.by_k) {
        Candidate& cur = found[{c.u0, k}];
        if (better(c, cur)) cur = c;
      }
    }
    if (!found.empty()) {
      double best_T = std::numeric_limits<double>::infinity();
      for (const auto& [key, c] : found) best_T = std::min(best_T, c.T);
      const double wanted = std::min(T_max, best_T + 2.0 * opts.grid);
      if (final_pass || wanted <= cap) break;
      cap = wanted;
      final_pass = true;
      continue;
    }
    if (cap >= T_max) break;
    cap = std::min(T_max, 2.0 * cap);
  }
  if (found.empty()) throw ReachabilityError("target unreachable within the horizon bound", closest);

  Candidate best;
  for (const auto& [key, c] : found) {
    if (better(c, best)) best = c;
  }
  auto terminal_of = [&](const Candidate& c) {
    return first_hit(model, dyn, BangBangControl::single_channel(c.u0, c.switches, c.T + 1.0).to_signal(model.box),
                     init, target, c.T + kReachTol, cfg)
        .terminal_state;
  };
  for (const auto& [key, c] : found) {
    OptimalResult r = to_result(model, c, terminal_of(c), target);
    r.solver_trace.push_back("oracle: u0=" + std::to_string(c.u0) + " switches=" + fmt_switches(c.switches) +
                             " T=" + std::to_string(c.T));
    out.per_structure[key] = std::move(r);
  }
  out.best = out.per_structure.at({best.u0, best.k});
  return out;
}

namespace {

template <class F>
std::pair<double, double> golden_min(F f, double a, double b, double tol) {
  double c = b - kGolden * (b - a), e = a + kGolden * (b - a);
  double fc = f(c), fe = f(e);
  while (b - a > tol) {
    if (fc < fe) {
      b = e;
      e = c;
      fe = fc;
      c = b - kGolden * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = e;
      fc = fe;
      e = a + kGolden * (b - a);
      fe = f(e);
    }
  }
  return fc < fe ? std::make_pair(c, fc) : std::make_pair(e, fe);
}

/// One channel: the last d-1 switch times and T are eliminated by a Newton solve of
/// z(T) = target center; the remaining switch times are optimized by golden-section
/// coordinate descent. With fewer than d unknowns the solve is Gauss-Newton and only
/// succeeds when the system is consistent.
std::optional<BangBangControl> refine_point(const CanonicalModel& model, const Dynamics& dyn,
                                            const SystemState& init, const TargetSpec& target,
                                            const BangBangControl& guess, double T_guess,
                                            double T_max, const RefineOptions& opts,
                                            const IntegratorConfig& cfg,
                                            std::vector<std::string>& trace) {
  const int d = StateLayout{model.n}.dim();
  const int k = static_cast<int>(guess.switch_times[0].size());
  const int n_dep = std::min(d, k + 1);
  const int n_free = k + 1 - n_dep;
  const Integrator integ(model, dyn, cfg);
  double tol_g = 1e-3 * target.delta;
  if (target.kind == TargetKind::Ellipsoid) {
    Eigen::SelfAdjointEigenSolver<Mat> es(target.V);
    tol_g = 1e-3 * std::sqrt(target.epsilon / es.eigenvalues().maxCoeff());
  }

  auto valid = [&](const std::vector<double>& s, double T) {
    if (!(T > 0.0) || !(T < T_max)) return false;
    for (int i = 0; i < k; ++i) {
      if (!(s[i] > 0.0) || !(s[i] < T)) return false;
      if (i > 0 && !(s[i] > s[i - 1])) return false;
    }
    return true;
  };
  auto miss = [&](const std::vector<double>& s, double T) -> std::optional<Vec> {
    if (!valid(s, T)) return std::nullopt;
    BangBangControl c = guess;
    c.switch_times[0] = s;
    c.horizon = T_max;
    FlowPoint p = integ.initial_point(init);
    integ.advance(p, T, c.to_signal(model.box), nullptr);
    return Vec(p.z.head(d) - target.center);
  };
  struct Point {
    std::vector<double> s;
    double T = 0.0;
  };
  auto get_dep = [&](const Point& x, int j) { return j < n_dep - 1 ? x.s[n_free + j] : x.T; };
  auto set_dep = [&](Point& x, int j, double v) {
    if (j < n_dep - 1) {
      x.s[n_free + j] = v;
    } else {
      x.T = v;
    }
  };
  auto newton = [&](Point x) -> std::optional<Point> {
    auto G = miss(x.s, x.T);
    if (!G) return std::nullopt;
    for (int it = 0; it < 40; ++it) {
      const double g = G->norm();
      if (g <= tol_g) return x;
      Mat J(d, n_dep);
      for (int j = 0; j < n_dep; ++j) {
        const double h = 1e-7 * std::max(1.0, std::abs(get_dep(x, j)));
        Point xp = x, xm = x;
        set_dep(xp, j, get_dep(x, j) + h);
        set_dep(xm, j, get_dep(x, j) - h);
        auto gp = miss(xp.s, xp.T);
        auto gm = miss(xm.s, xm.T);
        if (gp && gm) {
          J.col(j) = (*gp - *gm) / (2 * h);
        } else if (gp) {
          J.col(j) = (*gp - *G) / h;
        } else if (gm) {
          J.col(j) = (*G - *gm) / h;
        } else {
          return std::nullopt;
        }
      }
      const Vec step = J.colPivHouseholderQr().solve(-*G);
      if (!step.allFinite()) return std::nullopt;
      bool moved = false;
      for (double alpha = 1.0; alpha >= 1.0 / 256; alpha *= 0.5) {
        Point xn = x;
        for (int j = 0; j < n_dep; ++j) set_dep(xn, j, get_dep(x, j) + alpha * step[j]);
        auto Gn = miss(xn.s, xn.T);
        if (Gn && Gn->norm() < g) {
          x = std::move(xn);
          G = Gn;
          moved = true;
          break;
        }
      }
      if (!moved) return std::nullopt;
    }
    return G->norm() <= tol_g ? std::optional<Point>(x) : std::nullopt;
  };

  Point cur{guess.switch_times[0], T_guess};
  auto solved = newton(cur);
  if (!solved) {
    trace.push_back("refine: point elimination did not converge from the guess");
    return std::nullopt;
  }
  cur = *solved;
  trace.push_back("refine: point elimination T=" + std::to_string(cur.T));

  auto eval_free = [&](int i, double v, Point* out) {
    Point x = cur;
    x.s[i] = v;
    auto r = newton(x);
    if (!r) return std::numeric_limits<double>::infinity();
    if (out) *out = *r;
    return r->T;
  };
  double radius = opts.bracket;
  for (int sweep = 0; sweep < opts.max_sweeps && n_free > 0; ++sweep) {
    const Point start = cur;
    double max_move = 0.0;
    for (int i = 0; i < n_free; ++i) {
      const double v0 = cur.s[i];
      const auto [v, T] = golden_min([&](double vv) { return eval_free(i, vv, nullptr); }, v0 - radius,
                                     v0 + radius, 1e-11 * std::max(1.0, cur.T));
      if (T < cur.T) {
        Point x;
        eval_free(i, v, &x);
        cur = x;
        max_move = std::max(max_move, std::abs(v - v0));
      }
    }
    // Pattern move along the net displacement of this sweep.
    if (max_move > 0.0) {
      auto along = [&](double a, Point* out) {
        Point x = cur;
        for (int i = 0; i < n_free; ++i) x.s[i] = cur.s[i] + a * (cur.s[i] - start.s[i]);
        auto r = newton(x);
        if (!r) return std::numeric_limits<double>::infinity();
        if (out) *out = *r;
        return r->T;
      };
      const auto [a, T] = golden_min([&](double aa) { return along(aa, nullptr); }, 0.0, 8.0, 1e-6);
      if (T < cur.T) {
        Point x;
        along(a, &x);
        cur = x;
      }
    }
    std::ostringstream os;
    os << "refine: sweep " << sweep << " T=" << cur.T << " move=" << max_move;
    trace.push_back(os.str());
    if (max_move < 1e-9 * std::max(1.0, cur.T)) break;
    if (start.T - cur.T < 1e-10 * std::max(1.0, cur.T)) break;
    radius = std::min(opts.bracket, std::max(4.0 * max_move, 1e-6));
  }
  BangBangControl out = guess;
  out.switch_times[0] = cur.s;
  out.horizon = T_max;
  return out;
}

}  // namespace

OptimalResult optimize_switching(const CanonicalModel& model, const Dynamics& dyn,
                                 const SystemState& init, const TargetSpec& target,
                                 const BangBangControl& init_guess, const RefineOptions& opts,
                                 const IntegratorConfig& cfg) {
  target.validate(model.n);
  const double T_max = opts.T_max.value_or(std::max(default_horizon(init, target), 2.0 * init_guess.horizon));
  const ControlBox& box = model.box;
  BangBangControl probe = init_guess;
  probe.horizon = T_max;
  probe.validate(box);

  OptimalResult result;
  const int channels = probe.channels();
  const double penalty_weight = 10.0 * (1.0 + T_max);

  auto evaluate = [&](const BangBangControl& c, ReachResult* keep) {
    const ReachResult r = first_hit(model, dyn, c.to_signal(box), init, target, T_max, cfg);
    if (keep) *keep = r;
    if (r.hit) return r.T;
    return T_max + penalty_weight * std::max(r.closest, 0.0);
  };
  auto valid = [&](const BangBangControl& c) {
    for (const auto& s : c.switch_times) {
      for (std::size_t k = 0; k < s.size(); ++k) {
        if (!(s[k] > 0.0) || !(s[k] < T_max)) return false;
        if (k > 0 && !(s[k] > s[k - 1])) return false;
      }
    }
    return true;
  };
  auto merit_of = [&](const BangBangControl& c) {
    return valid(c) ? evaluate(c, nullptr) : std::numeric_limits<double>::infinity();
  };

  BangBangControl cur = probe;
  double cur_merit = evaluate(cur, nullptr);
  const double initial_merit = cur_merit;
  result.solver_trace.push_back("refine: start merit=" + std::to_string(cur_merit));

  bool eliminated = false;
  if (channels == 1) {
    // For ellipsoids, steering to the center gives a feasible start for the descent.
    const double T_guess = init_guess.horizon > 0.0 ? init_guess.horizon : 0.5 * T_max;
    if (auto c = refine_point(model, dyn, init, target, probe, T_guess, T_max, opts, cfg, result.solver_trace)) {
      const double m = merit_of(*c);
      if (m <= cur_merit) {
        cur = *c;
        cur_merit = m;
        eliminated = target.kind == TargetKind::Point;
      }
    }
  }

  double radius = opts.bracket;
  for (int sweep = 0; sweep < opts.max_sweeps && !eliminated; ++sweep) {
    double max_move = 0.0;
    const double sweep_start = cur_merit;
    const BangBangControl start = cur;
    for (int mode = 0; mode < 2; ++mode) {
      for (int ch = 0; ch < channels; ++ch) {
        const std::size_t count = cur.switch_times[static_cast<std::size_t>(ch)].size();
        for (std::size_t i = 0; i < count; ++i) {
          auto shift = [&, ch, i, mode](double d) {
            BangBangControl c = cur;
            auto& s = c.switch_times[static_cast<std::size_t>(ch)];
            if (mode == 0) {
              for (std::size_t k = i; k < s.size(); ++k) s[k] += d;  // arc duration i
            } else {
              s[i] += d;  // absolute switch time i
            }
            return c;
          };
          const auto [d, m] = golden_min([&](double dd) { return merit_of(shift(dd)); }, -radius, radius,
                                         1e-11 * std::max(1.0, cur_merit));
          if (m < cur_merit) {
            cur = shift(d);
            cur_merit = m;
            max_move = std::max(max_move, std::abs(d));
          }
        }
      }
    }
    if (max_move > 0.0) {
      auto along = [&](double a) {
        BangBangControl c = cur;
        for (std::size_t ch = 0; ch < c.switch_times.size(); ++ch) {
          for (std::size_t i = 0; i < c.switch_times[ch].size(); ++i) {
            c.switch_times[ch][i] += a * (cur.switch_times[ch][i] - start.switch_times[ch][i]);
          }
        }
        return c;
      };
      const auto [a, m] = golden_min([&](double aa) { return merit_of(along(aa)); }, 0.0, 8.0, 1e-6);
      if (m < cur_merit) {
        cur = along(a);
        cur_merit = m;
      }
    }
    std::ostringstream os;
    os << "refine: sweep " << sweep << " merit=" << cur_merit << " move=" << max_move;
    result.solver_trace.push_back(os.str());
    if (max_move < 1e-9 * std::max(1.0, cur_merit)) break;
    // Creeping along a narrow valley: stop once a sweep gains almost nothing.
    if (sweep_start - cur_merit < 1e-10 * std::max(1.0, cur_merit)) break;
    radius = std::min(opts.bracket, std::max(4.0 * max_move, 1e-6));
  }

  ReachResult reach;
  evaluate(cur, &reach);
  if (!reach.hit) {
    throw StructureError("switching structure never reaches the target; try max_switches+1");
  }

  // Clean up: drop switches at or after T, merge switch pairs closer than 1e-9 T,
  // and absorb a first arc of negligible length into the initial value.
  BangBangControl clean = cur;
  const double merge_tol = 1e-9 * std::max(1.0, reach.T);
  for (int ch = 0; ch < channels; ++ch) {
    auto& s = clean.switch_times[static_cast<std::size_t>(ch)];
    while (!s.empty() && s.back() >= reach.T - merge_tol) s.pop_back();
    for (std::size_t k = 0; k + 1 < s.size();) {
      if (s[k + 1] - s[k] < merge_tol) {
        s.erase(s.begin() + static_cast<long>(k), s.begin() + static_cast<long>(k) + 2);
      } else {
        ++k;
      }
    }
    if (!s.empty() && s.front() < merge_tol) {
      s.erase(s.begin());
      clean.initial[ch] = (clean.initial[ch] == box.lo[ch]) ? box.hi[ch] : box.lo[ch];
    }
  }
  ReachResult clean_reach;
  const double clean_merit = evaluate(clean, &clean_reach);
  if (clean_reach.hit && clean_merit <= reach.T + merge_tol) {
    cur = clean;
    reach = clean_reach;
  }
  if (reach.T > initial_merit) {
    cur = probe;
    evaluate(cur, &reach);
  }

  cur.horizon = reach.T;
  for (auto& s : cur.switch_times) {
    while (!s.empty() && s.back() >= reach.T) s.pop_back();
  }
  result.control = cur;
  result.T_opt = reach.T;
  result.terminal_state = reach.terminal_state;
  result.terminal_residual = terminal_residual(target, reach.terminal_state);
  result.solver_trace.push_back("refine: T=" + std::to_string(reach.T));
  return result;
}

SolveOutcome solve_time_optimal(const CanonicalModel& model, const Dynamics& dyn,
                                const SystemState& init, const TargetSpec& target,
                                const SolveOptions& opts, const IntegratorConfig& cfg) {
  const TargetSpec& grid_target = opts.oracle_target ? *opts.oracle_target : target;
  const OracleOutcome oracle = brute_force_oracle(model, dyn, init, grid_target, opts.oracle, cfg);
  SolveOutcome out;
  if (oracle.best.T_opt == 0.0 && target.contains(pack(init))) {
    out.best = oracle.best;
    out.per_structure = oracle.per_structure;
    return out;
  }
  RefineOptions ro = opts.refine;
  ro.bracket = std::max(ro.bracket, opts.oracle.grid);
  bool have = false;
  for (const auto& [key, cand] : oracle.per_structure) {
    OptimalResult r;
    try {
      r = optimize_switching(model, dyn, init, target, cand.control, ro, cfg);
    } catch (const StructureError&) {
      continue;
    }
    r.solver_trace.insert(r.solver_trace.begin(), cand.solver_trace.begin(), cand.solver_trace.end());
    out.per_structure[key] = r;
    if (!have) {
      out.best = r;
      have = true;
      continue;
    }
    const bool faster = r.T_opt < out.best.T_opt - opts.tie_tolerance;
    const bool tie = std::abs(r.T_opt - out.best.T_opt) <= opts.tie_tolerance;
    if (faster || (tie && r.control.total_switches() < out.best.control.total_switches())) out.best = r;
  }
  if (!have) throw StructureError("no switching structure could be refined onto the target");
  return out;
}

bool verify_feasible(const CanonicalModel& model, const Dynamics& dyn, const SystemState& init,
                     const TargetSpec& target, const OptimalResult& result, const IntegratorConfig& cfg) {
  if (result.T_opt == 0.0) return target.contains(pack(init));
  IntegratorConfig tight = cfg;
  tight.rel_tol /= 10.0;
  tight.abs_tol /= 10.0;
  const Integrator integ(model, dyn, tight);
  FlowPoint p = integ.initial_point(init);
  integ.advance(p, result.T_opt, result.control.to_signal(model.box), nullptr);
  const double v = target.value(p.z.head(StateLayout{model.n}.dim()));
  const double slack = target.kind == TargetKind::Point ? 1e-6 * target.delta : 1e-6 * target.epsilon;
  return v <= slack;
}

}  // namespace backlash

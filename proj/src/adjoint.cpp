#include "backlash/adjoint.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

namespace backlash {

namespace {

double selector(double value, double tol) {
  if (value > tol) return 1.0;
  if (value < -tol) return 0.0;
  return 0.5;
}

/// Primal data on one grid interval (t_i, t_{i+1}).
struct Piece {
  double t0 = 0.0;
  double h = 0.0;
  Vec z0, z1, r0, r1;
  IntervalMode mode = IntervalMode::Free;
  Vec u;

  SystemState at(double t, int n) const {
    const double s = std::clamp((t - t0) / h, 0.0, 1.0);
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s);
    const double h10 = s * (1 - s) * (1 - s);
    const double h01 = s * s * (3 - 2 * s);
    const double h11 = s * s * (s - 1);
    return unpack(h00 * z0 + h01 * z1 + h * (h10 * r0 + h11 * r1), n);
  }
};

Piece piece(const Trajectory& tr, std::size_t i) {
  const StateLayout L{tr.n};
  Piece p;
  p.t0 = tr.times[i];
  p.h = tr.times[i + 1] - tr.times[i];
  p.z0 = pack(tr.states[i]);
  p.z1 = pack(tr.left_state(i + 1));
  const bool rates = tr.rate_right.size() == tr.size() && tr.rate_left.size() == tr.size();
  p.r0 = rates ? Vec(tr.rate_right[i].head(L.dim())) : Vec::Zero(L.dim());
  p.r1 = rates ? Vec(tr.rate_left[i + 1].head(L.dim())) : Vec::Zero(L.dim());
  p.mode = i < tr.interval_modes.size() ? tr.interval_modes[i] : IntervalMode::Free;
  p.u = tr.controls[i + 1];
  return p;
}

/// Control used on the right of grid point i.
const Vec& right_control(const Trajectory& tr, std::size_t i) {
  return tr.controls[std::min(i + 1, tr.size() - 1)];
}

/// Generator of the augmented adjoint system d/dt [lambda; I] = [G lambda; l lambda],
/// where l lambda = -<d_y f, p> - d_y g r is the absolutely continuous part of dsigma.
Mat generator(const CanonicalModel& model, const std::optional<double>& gamma, SystemState s,
              const Vec& u, IntervalMode mode, double r_sigma = -1.0) {
  const StateLayout L{model.n};
  const int d = L.dim();
  if (mode == IntervalMode::Contact) {
    s.y = 0.0;
    s.w = 0.0;
  }
  const ModelJacobian jac = model_jacobian(model, s, u);
  Mat J = Mat::Zero(d, d);
  for (int i = 0; i < model.n; ++i) J(L.x() + i, L.v() + i) = 1.0;
  J(L.y(), L.w()) = 1.0;
  J.block(L.v(), 0, model.n, d) = jac.df;
  J.row(L.w()) = jac.dg.transpose();
  if (gamma && mode == IntervalMode::Penalty) {
    J(L.w(), L.y()) -= *gamma * std::max(s.w, 0.0);
    J(L.w(), L.w()) -= *gamma * std::max(s.y, 0.0);
  }
  Mat G = Mat::Zero(d + 1, d);
  G.topRows(d) = -J.transpose();
  G(L.w(), L.y()) = r_sigma;
  for (int i = 0; i < model.n; ++i) G(d, L.v() + i) = -jac.df(i, L.y());
  G(d, L.w()) = -jac.dg[L.y()];
  return G;
}

// Dormand-Prince 5(4) tableau.
constexpr double kC[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
constexpr double kA[7][6] = {
    {},
    {1.0 / 5},
    {3.0 / 40, 9.0 / 40},
    {44.0 / 45, -56.0 / 15, 32.0 / 9},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
    {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
constexpr double kB[7] = {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0.0};
constexpr double kE[7] = {71.0 / 57600,      0.0, -71.0 / 16695, 71.0 / 1920, -17253.0 / 339200,
                          22.0 / 525,        -1.0 / 40};

using GenFn = std::function<Mat(double)>;

/// Integrates d/dt X = G(t) X[0:d] from t_hi down to t_lo, adaptively.
Mat backward_dopri(const GenFn& gen, Mat X, int d, double t_lo, double t_hi, const AdjointOptions& opts) {
  double t = t_hi;
  double h = -(t_hi - t_lo);
  const double floor = 1e-14 * std::max(1.0, std::abs(t_hi));
  std::vector<Mat> k(7);
  for (int attempt = 0; t > t_lo; ++attempt) {
    if (attempt > 100000) throw IntegrationError("adjoint step limit exceeded", t_lo, t_hi);
    if (t + h < t_lo) h = t_lo - t;
    for (int s = 0; s < 7; ++s) {
      Mat Y = X;
      for (int j = 0; j < s; ++j) Y += h * kA[s][j] * k[j];
      k[s] = gen(t + kC[s] * h) * Y.topRows(d);
    }
    Mat Xn = X;
    Mat err = Mat::Zero(X.rows(), X.cols());
    for (int s = 0; s < 7; ++s) {
      Xn += h * kB[s] * k[s];
      err += h * kE[s] * k[s];
    }
    if (!Xn.allFinite()) throw IntegrationError("adjoint blow-up", t + h, t);
    const Mat scale =
        (opts.abs_tol + opts.rel_tol * X.cwiseAbs().cwiseMax(Xn.cwiseAbs()).array()).matrix();
    const double e = std::sqrt((err.array() / scale.array()).square().mean());
    if (e <= 1.0 || std::abs(h) <= floor) {
      t += h;
      X = std::move(Xn);
      if (t - t_lo <= floor) break;
      h *= std::clamp(0.9 * std::pow(std::max(e, 1e-10), -0.2), 0.2, 5.0);
    } else {
      h *= std::clamp(0.9 * std::pow(e, -0.2), 0.2, 1.0);
    }
  }
  return X;
}

/// Classical RK4 with a fixed number of substeps, used as the defect oracle.
Mat backward_rk4(const GenFn& gen, Mat X, int d, double t_lo, double t_hi, int substeps) {
  const double h = -(t_hi - t_lo) / substeps;
  double t = t_hi;
  for (int i = 0; i < substeps; ++i) {
    const Mat k1 = gen(t) * X.topRows(d);
    Mat Y = X + 0.5 * h * k1;
    const Mat k2 = gen(t + 0.5 * h) * Y.topRows(d);
    Y = X + 0.5 * h * k2;
    const Mat k3 = gen(t + 0.5 * h) * Y.topRows(d);
    Y = X + h * k3;
    const Mat k4 = gen(t + h) * Y.topRows(d);
    X += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
    t += h;
  }
  return X;
}

/// Packed (v, w, f, g) with the raw force g (limit form of the Hamiltonian).
Vec limit_velocity(const CanonicalModel& model, const SystemState& s, const Vec& u) {
  const StateLayout L{model.n};
  const ForceValues fg = eval_fg(model, s, u);
  Vec F(L.dim());
  F.segment(L.x(), model.n) = s.v;
  F[L.y()] = s.w;
  F.segment(L.v(), model.n) = fg.f;
  F[L.w()] = fg.g;
  return F;
}

/// Backward propagation of several terminal columns at once.
/// right[i]: multipliers at t_i+; sigma_left[i]: row of sigma values at t_i-;
/// integral[i]: int over (t_i, t_{i+1}) of l lambda dt.
struct Propagation {
  std::vector<Mat> right;
  std::vector<Vec> sigma_left;
  std::vector<Vec> integral;
};

Propagation propagate(const CanonicalModel& model, const Trajectory& primal, const Mat& terminal,
                      const AdjointOptions& opts) {
  const StateLayout L{model.n};
  const int d = L.dim();
  const std::size_t N = primal.size();
  if (N < 2) throw ArgumentError("adjoint needs a primal trajectory with at least two points");
  if (terminal.rows() != d) throw ArgumentError("terminal multiplier dimension mismatch");
  Propagation out;
  out.right.resize(N);
  out.sigma_left.resize(N);
  out.integral.assign(N, Vec::Zero(terminal.cols()));

  Mat lam = terminal;  // value at t_{i+1}- while stepping over interval i
  for (std::size_t i = N - 1; i-- > 0;) {
    out.sigma_left[i + 1] = lam.row(L.y()).transpose();
    const Piece pc = piece(primal, i);
    const GenFn gen = [&](double t) { return generator(model, primal.gamma, pc.at(t, model.n), pc.u, pc.mode); };
    Mat X(d + 1, lam.cols());
    X.topRows(d) = lam;
    X.row(d).setZero();
    X = backward_dopri(gen, X, d, pc.t0, pc.t0 + pc.h, opts);
    lam = X.topRows(d);
    out.integral[i] = -X.row(d).transpose();
    out.right[i] = lam;
    if (const Atom* atom = primal.atom_at(i); atom && primal.is_limit()) {
      // H is continuous across the velocity jump; this fixes sigma(t_i-).
      const Vec F_plus = limit_velocity(model, primal.states[i], right_control(primal, i));
      Vec F_minus = limit_velocity(model, atom->pre_state, primal.controls[i]);
      const double w_minus = atom->pre_state.w;
      F_minus[L.y()] = 0.0;
      for (int c = 0; c < lam.cols(); ++c) {
        const double H_plus = lam.col(c).dot(F_plus);
        const double rest = lam.col(c).dot(F_minus);
        lam(L.y(), c) = (H_plus - rest) / w_minus;
      }
    }
  }
  out.sigma_left[0] = lam.row(L.y()).transpose();
  return out;
}

AdjointTrajectory assemble(const CanonicalModel& model, const Trajectory& primal, const Propagation& prop,
                           const AdjointOptions& opts) {
  const std::size_t N = primal.size();
  AdjointTrajectory adj;
  adj.n = model.n;
  adj.gamma = primal.gamma;
  adj.times = primal.times;
  adj.adjoints.resize(N);
  adj.sigma.resize(N);
  adj.sigma_left.resize(N);
  adj.mu_cumulative.assign(N, 0.0);
  adj.hamiltonian.resize(N);
  adj.h_y.resize(N);
  adj.h_w.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    adj.h_y[i] = selector(primal.states[i].y, opts.tol_h);
    adj.h_w[i] = selector(primal.states[i].w, opts.tol_h);
  }
  for (std::size_t i = 0; i < N; ++i) {
    const Mat& col = prop.right[i];
    adj.adjoints[i] = unpack_adjoint(col.col(0), model.n);
    const SystemState& s = primal.states[i];
    double sigma = adj.adjoints[i].sigma;
    if (primal.gamma) sigma -= *primal.gamma * adj.h_w[i] * std::max(s.y, 0.0) * adj.adjoints[i].r;
    adj.sigma[i] = sigma;
    adj.sigma_left[i] = primal.gamma ? sigma : prop.sigma_left[i][0];
    adj.hamiltonian[i] = hamiltonian(model, primal.gamma, s, adj.adjoints[i], right_control(primal, i));
  }
  for (std::size_t i = 1; i < N; ++i) {
    const double dmu = adj.sigma_left[i] - adj.sigma[i - 1] - prop.integral[i - 1][0];
    adj.mu_cumulative[i] = adj.mu_cumulative[i - 1] + dmu + (adj.sigma[i] - adj.sigma_left[i]);
  }
  return adj;
}

AdjointTrajectory run(const CanonicalModel& model, const Trajectory& primal, const AdjointState& terminal,
                      const AdjointOptions& opts) {
  const Vec lamT = pack(terminal);
  if (lamT.size() != StateLayout{model.n}.dim()) throw ArgumentError("terminal multiplier dimension mismatch");
  if (!lamT.allFinite()) throw ArgumentError("terminal multiplier must be finite");
  Propagation prop = propagate(model, primal, lamT, opts);
  prop.right.back() = lamT;
  return assemble(model, primal, prop, opts);
}

}  // namespace

bool AdjointState::finite() const {
  return q.allFinite() && std::isfinite(sigma) && p.allFinite() && std::isfinite(r);
}

Vec pack(const AdjointState& a) {
  const int n = static_cast<int>(a.q.size());
  if (a.p.size() != n) throw ArgumentError("adjoint q and p must have equal length");
  const StateLayout L{n};
  Vec z(L.dim());
  z.segment(L.x(), n) = a.q;
  z[L.y()] = a.sigma;
  z.segment(L.v(), n) = a.p;
  z[L.w()] = a.r;
  return z;
}

AdjointState unpack_adjoint(const Eigen::Ref<const Vec>& lambda, int n) {
  const StateLayout L{n};
  if (lambda.size() < L.dim()) throw ArgumentError("adjoint vector too short");
  return {lambda.segment(L.x(), n), lambda[L.y()], lambda.segment(L.v(), n), lambda[L.w()]};
}

AdjointState AdjointTrajectory::limit_state(std::size_t i) const {
  AdjointState a = adjoints[i];
  a.sigma = sigma[i];
  return a;
}

AdjointState AdjointTrajectory::limit_state_left(std::size_t i) const {
  AdjointState a = adjoints[i];
  a.sigma = sigma_left[i];
  return a;
}

AdjointTrajectory integrate_adjoint_penalty(const CanonicalModel& model, double gamma, const Trajectory& primal,
                                            const AdjointState& terminal, const AdjointOptions& opts) {
  if (!(gamma > 0.0)) throw ArgumentError("gamma must be positive");
  if (primal.is_limit() || *primal.gamma != gamma) {
    throw ArgumentError("primal trajectory was not integrated with this gamma");
  }
  return run(model, primal, terminal, opts);
}

AdjointTrajectory integrate_adjoint_limit(const CanonicalModel& model, const Trajectory& primal,
                                          const AdjointState& terminal, const AdjointOptions& opts) {
  if (!primal.is_limit()) throw ArgumentError("primal trajectory is not a limit trajectory");
  return run(model, primal, terminal, opts);
}

AdjointTrajectory integrate_adjoint(const CanonicalModel& model, const Trajectory& primal,
                                    const AdjointState& terminal, const AdjointOptions& opts) {
  return run(model, primal, terminal, opts);
}

double hamiltonian(const CanonicalModel& model, const std::optional<double>& gamma, const SystemState& s,
                   const AdjointState& a, const Vec& u) {
  if (a.q.size() != model.n || a.p.size() != model.n) throw ArgumentError("adjoint dimension mismatch");
  const ForceValues fg = eval_fg(model, s, u);
  double g = fg.g;
  if (gamma) g -= *gamma * std::max(s.y, 0.0) * std::max(s.w, 0.0);
  return a.q.dot(s.v) + a.sigma * s.w + a.p.dot(fg.f) + a.r * g;
}

namespace {

/// Switching coefficients <p, f3_j> + r g3_j.
Vec switching_coefficients(const CanonicalModel& model, const SystemState& s, const AdjointState& a) {
  const AffineTerms t = model.terms(s.x, s.y, s.v);
  return t.f3.transpose() * a.p + a.r * t.g3;
}

struct OneSided {
  double residual = 0.0;
  Vec suggested;
  bool degenerate = false;
};

OneSided max_condition_at(const CanonicalModel& model, const SystemState& s, const AdjointState& a, const Vec& u,
                          double tol) {
  const Vec c = switching_coefficients(model, s, a);
  OneSided out;
  out.suggested = u;
  for (int j = 0; j < c.size(); ++j) {
    if (c[j] > tol) {
      out.suggested[j] = model.box.hi[j];
    } else if (c[j] < -tol) {
      out.suggested[j] = model.box.lo[j];
    } else {
      out.degenerate = true;
    }
    out.residual += c[j] * (out.suggested[j] - u[j]);
  }
  out.residual = std::max(out.residual, 0.0);
  return out;
}

}  // namespace

MaxConditionTrace max_condition_residual(const CanonicalModel& model, const Trajectory& primal,
                                         const AdjointTrajectory& adj, double switch_tol) {
  if (adj.size() != primal.size()) throw ArgumentError("adjoint and primal grids differ");
  MaxConditionTrace tr;
  const std::size_t N = primal.size();
  for (std::size_t i = 0; i < N; ++i) {
    const OneSided right = max_condition_at(model, primal.states[i], adj.adjoints[i], right_control(primal, i), switch_tol);
    tr.residual.push_back(right.residual);
    tr.suggested.push_back(right.suggested);
    tr.degenerate.push_back(right.degenerate);
    tr.degenerate_count += right.degenerate ? 1 : 0;
    tr.max_residual = std::max(tr.max_residual, right.residual);
    if (i > 0) {
      const OneSided left =
          max_condition_at(model, primal.left_state(i), adj.adjoints[i], primal.controls[i], switch_tol);
      tr.max_residual = std::max(tr.max_residual, left.residual);
    }
  }
  return tr;
}

PMPReport verify_theorem2(const CanonicalModel& model, const Trajectory& primal, const AdjointTrajectory& adj,
                          const PMPTolerances& tol) {
  if (adj.size() != primal.size() || adj.n != model.n) throw ArgumentError("adjoint and primal grids differ");
  for (std::size_t i = 0; i < adj.size(); ++i) {
    if (adj.times[i] != primal.times[i]) throw ArgumentError("adjoint and primal grids differ");
  }
  const StateLayout L{model.n};
  const int d = L.dim();
  const std::size_t N = primal.size();
  PMPReport rep;

  // ODE defects against an independent RK4 pass over every interval.
  for (std::size_t i = 0; i + 1 < N; ++i) {
    const Piece pc = piece(primal, i);
    if (!(pc.h > 0.0)) continue;
    const GenFn gen = [&](double t) {
      return generator(model, primal.gamma, pc.at(t, model.n), pc.u, pc.mode, tol.r_sigma_sign);
    };
    Vec raw_end = pack(adj.adjoints[i + 1]);
    if (primal.is_limit()) raw_end[L.y()] = adj.sigma_left[i + 1];
    Mat X(d + 1, 1);
    X.col(0).head(d) = raw_end;
    X(d, 0) = 0.0;
    const int substeps = 32;
    X = backward_rk4(gen, X, d, pc.t0, pc.t0 + pc.h, substeps);
    const AdjointState ref = unpack_adjoint(X.col(0).head(d), model.n);
    const AdjointState& got = adj.adjoints[i];
    if (model.n > 0) {
      rep.residual_q = std::max(rep.residual_q, (got.q - ref.q).norm() / pc.h);
      rep.residual_p = std::max(rep.residual_p, (got.p - ref.p).norm() / pc.h);
    }
    rep.residual_r = std::max(rep.residual_r, std::abs(got.r - ref.r) / pc.h);
    const double integral = -X(d, 0);
    const double dmu = adj.sigma_left[i + 1] - adj.sigma[i] - integral;
    const double y_mid = pc.at(pc.t0 + 0.5 * pc.h, model.n).y;
    if (y_mid < -tol.contact) {
      rep.mu_support_violation += std::abs(dmu);
      rep.sigma_defect = std::max(rep.sigma_defect, std::abs(dmu) / pc.h);
    }
  }
  for (std::size_t i = 0; i < N; ++i) {
    if (primal.states[i].y < -tol.contact) rep.mu_support_violation += std::abs(adj.sigma[i] - adj.sigma_left[i]);
  }

  // Maximum condition.
  const MaxConditionTrace mc = max_condition_residual(model, primal, adj, tol.switch_tol);
  rep.max_condition_violation = mc.max_residual;
  rep.degenerate_points = mc.degenerate_count;

  // Hamiltonian in the limit form, off the penalty layers.
  std::vector<std::pair<double, double>> bands;
  if (primal.gamma) {
    const double half = tol.band_factor / std::sqrt(*primal.gamma);
    for (std::size_t i = 0; i + 1 < N; ++i) {
      if (i < primal.interval_modes.size() && primal.interval_modes[i] == IntervalMode::Penalty) {
        bands.emplace_back(primal.times[i] - half, primal.times[i + 1] + half);
      }
    }
  }
  auto in_band = [&](double t) {
    return std::any_of(bands.begin(), bands.end(), [t](const auto& b) { return t >= b.first && t <= b.second; });
  };
  std::vector<double> H;
  for (std::size_t i = 0; i < N; ++i) {
    if (in_band(primal.times[i])) continue;
    H.push_back(hamiltonian(model, std::nullopt, primal.states[i], adj.limit_state(i), right_control(primal, i)));
    if (i > 0) {
      H.push_back(hamiltonian(model, std::nullopt, primal.left_state(i), adj.limit_state_left(i), primal.controls[i]));
    }
  }
  if (!H.empty()) {
    std::vector<double> sorted = H;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2), sorted.end());
    rep.H_bar = sorted[sorted.size() / 2];
    for (double h : H) rep.hamiltonian_drift = std::max(rep.hamiltonian_drift, std::abs(h - rep.H_bar));
  }

  const AdjointState last = adj.limit_state_left(N - 1);
  rep.nontriviality = pack(last).squaredNorm();

  auto check = [&](bool ok, const std::string& what, double value, double limit) {
    if (ok) return;
    std::ostringstream os;
    os << what << " = " << value << " exceeds " << limit;
    rep.failures.push_back(os.str());
  };
  check(rep.residual_q <= tol.residual, "residual_q", rep.residual_q, tol.residual);
  check(rep.residual_p <= tol.residual, "residual_p", rep.residual_p, tol.residual);
  check(rep.residual_r <= tol.residual, "residual_r", rep.residual_r, tol.residual);
  check(rep.sigma_defect <= tol.residual, "sigma_defect", rep.sigma_defect, tol.residual);
  check(rep.max_condition_violation <= tol.max_condition, "max_condition_violation", rep.max_condition_violation,
        tol.max_condition);
  const double drift_limit = tol.hamiltonian * (1.0 + std::abs(rep.H_bar));
  check(rep.hamiltonian_drift <= drift_limit, "hamiltonian_drift", rep.hamiltonian_drift, drift_limit);
  if (rep.H_bar < -tol.hamiltonian_sign) {
    std::ostringstream os;
    os << "H_bar = " << rep.H_bar << " is negative";
    rep.failures.push_back(os.str());
  }
  check(std::abs(rep.nontriviality - 1.0) <= tol.nontriviality, "|nontriviality - 1|",
        std::abs(rep.nontriviality - 1.0), tol.nontriviality);
  check(rep.mu_support_violation <= tol.mu, "mu_support_violation", rep.mu_support_violation, tol.mu);
  rep.pass = rep.failures.empty();
  return rep;
}

MainAssumptionReport main_assumption_diagnostic(const CanonicalModel& model, const Trajectory& primal,
                                                const AdjointTrajectory& adj, double tol_w) {
  if (adj.size() != primal.size()) throw ArgumentError("adjoint and primal grids differ");
  const double gamma = primal.gamma.value_or(0.0);
  const StateLayout L{model.n};
  auto phi = [&](std::size_t i) {
    const SystemState& s = primal.states[i];
    const ModelJacobian jac = model_jacobian(model, s, right_control(primal, i));
    const double r = adj.adjoints[i].r;
    return -jac.dg[L.w()] * r + gamma * adj.h_w[i] * std::max(s.y, 0.0) * r;
  };
  auto in_E = [&](std::size_t i) { return primal.states[i].y >= 0.0 && std::abs(primal.states[i].w) <= tol_w; };
  MainAssumptionReport rep;
  for (std::size_t i = 0; i + 1 < primal.size(); ++i) {
    if (!in_E(i) || !in_E(i + 1)) continue;
    const double h = primal.times[i + 1] - primal.times[i];
    if (!(h > 0.0)) continue;
    rep.measure_E += h;
    ++rep.intervals;
    rep.derivative_defect = std::max(rep.derivative_defect, std::abs(phi(i + 1) - phi(i)) / h);
  }
  return rep;
}

GradientCheck adjoint_gradient_check(const CanonicalModel& model, double gamma, const BangBangControl& control,
                                     const SystemState& init, const Vec& direction, std::optional<Vec> delta,
                                     const IntegratorConfig& cfg) {
  const StateLayout L{model.n};
  const int d = L.dim();
  if (direction.size() != d) throw ArgumentError("direction must have the packed state dimension");
  Vec dz = delta.value_or(Vec::Ones(d) / std::sqrt(static_cast<double>(d)));
  if (dz.size() != d) throw ArgumentError("perturbation must have the packed state dimension");

  const ControlSignal signal = control.to_signal(model.box);
  const double T = control.horizon;
  GradientCheck out;
  const Trajectory primal = integrate_penalty(model, gamma, signal, T, cfg, init);
  for (const auto& e : primal.events) {
    if (e.kind != EventKind::ControlSwitch) {
      out.inconclusive = true;
      out.reason = std::string("nonsmooth event (") + to_string(e.kind) + ") inside the stencil";
      return out;
    }
  }
  AdjointOptions opts;
  opts.rel_tol = std::min(opts.rel_tol, cfg.rel_tol);
  opts.abs_tol = std::min(opts.abs_tol, cfg.abs_tol);
  const AdjointTrajectory adj = integrate_adjoint_penalty(model, gamma, primal, unpack_adjoint(direction, model.n), opts);
  out.adjoint_value = pack(adj.adjoints.front()).dot(dz);

  const Vec z0 = pack(init);
  const double eps = 1e-3 * (1.0 + z0.norm());
  auto value = [&](double e) {
    const Trajectory tr = integrate_penalty(model, gamma, signal, T, cfg, unpack(z0 + e * dz, model.n));
    for (const auto& ev : tr.events) {
      if (ev.kind != EventKind::ControlSwitch) {
        out.inconclusive = true;
        out.reason = std::string("nonsmooth event (") + to_string(ev.kind) + ") inside the stencil";
      }
    }
    return direction.dot(pack(tr.states.back()));
  };
  out.fd_value = (value(eps) - value(-eps)) / (2 * eps);
  out.rel_gap = std::abs(out.adjoint_value - out.fd_value) / std::max(1.0, std::abs(out.fd_value));
  return out;
}

AdjointState terminal_covector(const CanonicalModel& model, const Trajectory& primal, const TargetSpec& target,
                               const AdjointOptions& opts) {
  const StateLayout L{model.n};
  const int d = L.dim();
  target.validate(model.n);
  const Vec zT = pack(primal.states.back());
  if (target.kind == TargetKind::Ellipsoid) {
    const Vec g = target.V * (zT - target.center);
    if (!(g.norm() > 0.0)) throw ArgumentError("terminal state at the ellipsoid center");
    return unpack_adjoint(-g / g.norm(), model.n);
  }

  const std::size_t N = primal.size();
  Propagation prop = propagate(model, primal, Mat::Identity(d, d), opts);
  prop.right.back() = Mat::Identity(d, d);

  // Switching conditions: coefficient of every toggled channel vanishes at its switch.
  std::vector<Eigen::RowVectorXd> rows;
  for (std::size_t i = 1; i + 1 < N; ++i) {
    const Vec& ul = primal.controls[i];
    const Vec& ur = primal.controls[i + 1];
    for (int j = 0; j < ul.size(); ++j) {
      if (ul[j] == ur[j]) continue;
      const SystemState& s = primal.states[i];
      const AffineTerms t = model.terms(s.x, s.y, s.v);
      Eigen::RowVectorXd row = t.g3[j] * prop.right[i].row(L.w());
      for (int k = 0; k < model.n; ++k) row += t.f3(k, j) * prop.right[i].row(L.v() + k);
      rows.push_back(row);
    }
  }
  Mat Nsp;
  if (rows.empty()) {
    Nsp = Mat::Identity(d, d);
  } else {
    Mat S(static_cast<long>(rows.size()), d);
    for (std::size_t k = 0; k < rows.size(); ++k) S.row(static_cast<long>(k)) = rows[k] / std::max(rows[k].norm(), 1e-300);
    Eigen::JacobiSVD<Mat> svd(S, Eigen::ComputeFullV);
    const Vec sv = svd.singularValues();
    int rank = 0;
    for (int k = 0; k < sv.size(); ++k) rank += sv[k] > 1e-9 * std::max(sv[0], 1e-300) ? 1 : 0;
    const int null_dim = std::max(1, d - rank);
    Nsp = svd.matrixV().rightCols(null_dim);
  }

  // Linear maps lambda_T -> switching coefficients at every grid point (both sides)
  // and lambda_T -> H at T.
  struct Probe {
    Eigen::RowVectorXd coef;
    double sign;
    double weight;
  };
  std::vector<Probe> probes;
  for (std::size_t i = 0; i < N; ++i) {
    const double w_left = i > 0 ? primal.times[i] - primal.times[i - 1] : 0.0;
    const double w_right = i + 1 < N ? primal.times[i + 1] - primal.times[i] : 0.0;
    const SystemState& s = primal.states[i];
    const AffineTerms t = model.terms(s.x, s.y, s.v);
    for (int side = 0; side < 2; ++side) {
      if ((side == 0 && i == 0) || (side == 1 && i + 1 == N)) continue;
      const Vec& u = side == 0 ? primal.controls[i] : right_control(primal, i);
      for (int j = 0; j < u.size(); ++j) {
        double sign = 0.0;
        if (u[j] == model.box.hi[j]) sign = 1.0;
        if (u[j] == model.box.lo[j]) sign = -1.0;
        if (sign == 0.0) continue;
        Eigen::RowVectorXd row = t.g3[j] * prop.right[i].row(L.w());
        for (int k = 0; k < model.n; ++k) row += t.f3(k, j) * prop.right[i].row(L.v() + k);
        probes.push_back({row, sign, 0.5 * (side == 0 ? w_left : w_right)});
      }
    }
  }
  const Eigen::RowVectorXd H_row = limit_velocity(model, primal.states.back(), primal.controls.back()).transpose();

  struct Score {
    double violation;
    double min_margin;
  };
  auto score = [&](const Vec& lam) {
    Score sc{0.0, std::numeric_limits<double>::infinity()};
    for (const auto& p : probes) {
      const double m = p.sign * p.coef.dot(lam);
      sc.violation += std::max(0.0, -m) * p.weight;
      sc.min_margin = std::min(sc.min_margin, m);
    }
    sc.violation += std::max(0.0, -H_row.dot(lam));
    return sc;
  };
  auto better = [](const Score& a, const Score& b) {
    if (std::abs(a.violation - b.violation) > 1e-12) return a.violation < b.violation;
    return a.min_margin > b.min_margin;
  };

  const int m = static_cast<int>(Nsp.cols());
  std::vector<Vec> candidates;
  if (m == 1) {
    candidates = {Vec(Nsp.col(0)), Vec(-Nsp.col(0))};
  } else if (m == 2) {
    for (int k = 0; k < 720; ++k) {
      const double a = 2 * std::numbers::pi * k / 720;
      candidates.push_back(std::cos(a) * Nsp.col(0) + std::sin(a) * Nsp.col(1));
    }
  } else {
    std::mt19937 rng(12345);
    std::normal_distribution<double> nd;
    for (int k = 0; k < 4000; ++k) {
      Vec c(m);
      for (int j = 0; j < m; ++j) c[j] = nd(rng);
      candidates.push_back(Nsp * c.normalized());
    }
  }
  Vec best = candidates.front();
  Score best_score = score(best);
  for (const auto& c : candidates) {
    const Score s = score(c);
    if (better(s, best_score)) {
      best = c;
      best_score = s;
    }
  }
  return unpack_adjoint(best / best.norm(), model.n);
}

OptimalResult polish_extremal(const CanonicalModel& model, const Dynamics& dyn, const SystemState& init,
                              const TargetSpec& target, const OptimalResult& result, const IntegratorConfig& cfg) {
  if (target.kind != TargetKind::Ellipsoid || result.control.channels() != 1 || result.T_opt <= 0.0) return result;
  const std::vector<double> s0 = result.control.switch_times[0];
  const int k = static_cast<int>(s0.size());
  const Integrator integ(model, dyn, cfg);

  auto residual = [&](const Vec& x) -> std::optional<Vec> {
    const double T = x[k];
    for (int i = 0; i < k; ++i) {
      if (!(x[i] > 0.0) || !(x[i] < T) || (i > 0 && !(x[i] > x[i - 1]))) return std::nullopt;
    }
    BangBangControl c = result.control;
    c.switch_times[0].assign(x.data(), x.data() + k);
    c.horizon = T;
    Trajectory tr;
    try {
      tr = integ.integrate(c.to_signal(model.box), T, init);
    } catch (const Error&) {
      return std::nullopt;
    }
    const Vec zT = pack(tr.states.back());
    Vec F(k + 1);
    F[k] = target.value(zT) / target.epsilon;
    if (k == 0) return F;
    const Vec g = target.V * (zT - target.center);
    const AdjointTrajectory adj = integrate_adjoint(model, tr, unpack_adjoint(-g / g.norm(), model.n));
    int row = 0;
    for (std::size_t i = 1; i + 1 < tr.size() && row < k; ++i) {
      if (tr.controls[i][0] == tr.controls[i + 1][0]) continue;
      F[row++] = switching_coefficients(model, tr.states[i], adj.adjoints[i])[0];
    }
    if (row != k) return std::nullopt;
    return F;
  };

  Vec x(k + 1);
  for (int i = 0; i < k; ++i) x[i] = s0[static_cast<std::size_t>(i)];
  x[k] = result.T_opt;
  auto F = residual(x);
  if (!F) return result;
  bool converged = false;
  for (int it = 0; it < 30; ++it) {
    if (F->norm() <= 1e-11) {
      converged = true;
      break;
    }
    Mat J(k + 1, k + 1);
    for (int j = 0; j <= k; ++j) {
      const double h = 1e-7 * std::max(1.0, std::abs(x[j]));
      Vec xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      auto fp = residual(xp);
      auto fm = residual(xm);
      if (!fp || !fm) return result;
      J.col(j) = (*fp - *fm) / (2 * h);
    }
    const Vec step = J.colPivHouseholderQr().solve(-*F);
    if (!step.allFinite()) return result;
    bool moved = false;
    for (double a = 1.0; a >= 1.0 / 256; a *= 0.5) {
      auto Fn = residual(x + a * step);
      if (Fn && Fn->norm() < F->norm()) {
        x += a * step;
        F = Fn;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  if (!converged && F->norm() > 1e-9) return result;

  BangBangControl c = result.control;
  c.switch_times[0].assign(x.data(), x.data() + k);
  c.horizon = x[k];
  const ReachResult hit = first_hit(model, dyn, c.to_signal(model.box), init, target, x[k] * (1 + 1e-9) + 1e-12, cfg);
  if (!hit.hit || hit.T > result.T_opt + 1e-8) return result;
  OptimalResult out = result;
  c.horizon = hit.T;
  out.control = c;
  out.T_opt = hit.T;
  out.terminal_state = hit.terminal_state;
  const Vec dz = pack(hit.terminal_state) - target.center;
  out.terminal_residual = dz.dot(target.V * dz);
  std::ostringstream os;
  os << "polish: T=" << hit.T << " |F|=" << F->norm();
  out.solver_trace.push_back(os.str());
  return out;
}

}  // namespace backlash

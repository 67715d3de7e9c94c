#include "backlash/stabilize.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

namespace backlash {

namespace {

/// Stacked dynamics (v, w, f, g) at packed z.
Vec stacked(const CanonicalModel& model, const Vec& z, const Vec& u) {
  const StateLayout L{model.n};
  const SystemState s = unpack(z, model.n);
  const ForceValues fg = eval_fg(model, s, u);
  Vec F(L.dim());
  F.segment(L.x(), model.n) = s.v;
  F[L.y()] = s.w;
  F.segment(L.v(), model.n) = fg.f;
  F[L.w()] = fg.g;
  return F;
}

/// Solves M X + X M' = Q by the Kronecker form.
Mat solve_lyapunov(const Mat& M, const Mat& Q) {
  const int d = static_cast<int>(M.rows());
  const Mat I = Mat::Identity(d, d);
  Mat K = Mat::Zero(d * d, d * d);
  // Column-major vec: vec(M X) = (I kron M) vec X, vec(X M') = (M kron I) vec X.
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      K.block(i * d, j * d, d, d) += M(i, j) * I;
      if (i == j) K.block(i * d, j * d, d, d) += M;
    }
  }
  const Vec q = Eigen::Map<const Vec>(Q.data(), d * d);
  const Vec x = K.fullPivLu().solve(q);
  Mat X = Eigen::Map<const Mat>(x.data(), d, d);
  return 0.5 * (X + X.transpose());
}

double golden_min(const std::function<double(double)>& f, double a, double b) {
  const double r = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - r * (b - a), d = a + r * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < 200 && b - a > 1e-15 * (1.0 + std::abs(b)); ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - r * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + r * (b - a);
      fd = f(d);
    }
  }
  return std::min({fc, fd, f(a), f(b)});
}

}  // namespace

LinearizedSystem linearize(const CanonicalModel& model, const SystemState& equilibrium, std::optional<Vec> u0,
                           double equilibrium_tol) {
  model.validate();
  if (equilibrium.n() != model.n || equilibrium.v.size() != model.n) {
    throw ContractViolation("linearize: state dimension does not match the model");
  }
  const Vec u = u0.value_or(Vec::Zero(model.m));
  if (u.size() != model.m) throw ContractViolation("linearize: control dimension does not match the model");
  if (!model.box.contains(u)) throw ArgumentError("linearize: u0 outside the control box");

  const Vec z = pack(equilibrium);
  const Vec F0 = stacked(model, z, u);
  if (!(F0.lpNorm<1>() <= equilibrium_tol)) {
    throw NotEquilibrium("linearize: residual " + std::to_string(F0.lpNorm<1>()) + " exceeds " +
                         std::to_string(equilibrium_tol));
  }
  const int d = static_cast<int>(z.size());
  const double h = 1e-6 * (1.0 + z.norm());
  LinearizedSystem lin;
  lin.z_star = z;
  lin.u0 = u;
  lin.A.resize(d, d);
  lin.B.resize(d, model.m);
  for (int j = 0; j < d; ++j) {
    Vec zp = z, zm = z;
    zp[j] += h;
    zm[j] -= h;
    lin.A.col(j) = (stacked(model, zp, u) - stacked(model, zm, u)) / (2 * h);
  }
  const double hu = 1e-6 * (1.0 + u.norm());
  for (int j = 0; j < model.m; ++j) {
    Vec up = u, um = u;
    up[j] += hu;
    um[j] -= hu;
    lin.B.col(j) = (stacked(model, z, up) - stacked(model, z, um)) / (2 * hu);
  }
  return lin;
}

int controllability_rank(const Mat& A, const Mat& B) {
  const int d = static_cast<int>(A.rows());
  if (A.cols() != d || B.rows() != d) throw ContractViolation("controllability_rank: dimension mismatch");
  const int m = static_cast<int>(B.cols());
  if (d == 0 || m == 0) return 0;
  Mat K(d, d * m);
  Mat P = B;
  for (int k = 0; k < d; ++k) {
    K.middleCols(k * m, m) = P;
    P = A * P;
  }
  const Vec sv = Eigen::JacobiSVD<Mat>(K).singularValues();
  if (!(sv[0] > 0.0)) return 0;
  const double thr = d * sv[0] * 1e-12;
  return static_cast<int>((sv.array() > thr).count());
}

double spectral_abscissa(const Mat& A) {
  if (A.rows() == 0) return -std::numeric_limits<double>::infinity();
  return Eigen::EigenSolver<Mat>(A, false).eigenvalues().real().maxCoeff();
}

Mat stabilizing_feedback(const Mat& A, const Mat& B, double margin) {
  const int d = static_cast<int>(A.rows());
  const int m = static_cast<int>(B.cols());
  if (!(margin >= 0.0)) throw ArgumentError("margin must be nonnegative");
  if (spectral_abscissa(A) <= -margin) return Mat::Zero(m, d);
  if (controllability_rank(A, B) < d) throw ControllabilityError("stabilizing_feedback: (A, B) is not controllable");

  const Mat I = Mat::Identity(d, d);
  const Mat As = A + margin * I;
  // Bass seed: (As + beta I) P + P (As + beta I)' = 2 B B' gives As - B B' P^-1 stable.
  const double beta = As.norm() + 1.0;
  const Mat P = solve_lyapunov(As + beta * I, 2.0 * B * B.transpose());
  const Mat K_seed = B.transpose() * P.llt().solve(I);
  Mat K = K_seed;

  // Newton-Kleinman on As' X + X As - X B B' X + I = 0.
  Mat X = Mat::Zero(d, d);
  for (int it = 0; it < 50; ++it) {
    const Mat Ak = As - B * K;
    const Mat Xn = solve_lyapunov(Ak.transpose(), -(I + K.transpose() * K));
    if (!Xn.allFinite()) break;
    const double change = (Xn - X).norm();
    X = Xn;
    K = B.transpose() * X;
    if (change <= 1e-12 * (1.0 + X.norm())) break;
  }
  Mat C = -K;
  if (!C.allFinite() || spectral_abscissa(A + B * C) > -margin) C = -K_seed;
  if (spectral_abscissa(A + B * C) > -margin) throw Error("stabilizing_feedback: synthesis did not meet the margin");
  return C;
}

Mat lyapunov_V(const Mat& A_cl) {
  if (A_cl.rows() != A_cl.cols()) throw ContractViolation("lyapunov_V: matrix must be square");
  if (!(spectral_abscissa(A_cl) < 0.0)) throw ArgumentError("lyapunov_V: closed loop is not Hurwitz");
  const int d = static_cast<int>(A_cl.rows());
  return solve_lyapunov(A_cl.transpose(), -Mat::Identity(d, d));
}

double pick_epsilon(const Mat& V, const Mat& C, const ControlBox& box, const Vec& u0, double cap) {
  if (!(cap > 0.0)) throw ArgumentError("epsilon cap must be positive");
  const Eigen::LLT<Mat> llt(V);
  if (llt.info() != Eigen::Success) throw ArgumentError("pick_epsilon: V is not positive definite");
  const Mat S = C * llt.solve(C.transpose());
  double eps = std::numeric_limits<double>::infinity();
  for (int i = 0; i < C.rows(); ++i) {
    const double room = std::min(box.hi[i] - u0[i], u0[i] - box.lo[i]);
    if (S(i, i) > 0.0) eps = std::min(eps, room * room / S(i, i));
  }
  return std::isfinite(eps) ? std::min(cap, 0.5 * eps) : cap;
}

AdjointState transversality(const Vec& z_T, const Vec& z_star, const Mat& V) {
  if (z_T.size() != z_star.size() || V.rows() != z_T.size() || z_T.size() < 2 || z_T.size() % 2 != 0) {
    throw ContractViolation("transversality: dimension mismatch");
  }
  const Vec g = V * (z_T - z_star);
  const double norm = g.norm();
  if (!(norm > 0.0)) throw DegenerateTransversality("transversality: terminal state at the ellipsoid center");
  return unpack_adjoint(-g / norm, static_cast<int>(z_T.size() / 2 - 1));
}

double rho_eigen_bound(const Mat& V, double epsilon) {
  if (!(epsilon > 0.0)) throw ArgumentError("epsilon must be positive");
  const Vec l = Eigen::SelfAdjointEigenSolver<Mat>(V).eigenvalues();
  if (!(l.minCoeff() > 0.0)) throw ArgumentError("V is not positive definite");
  const double lmax = l.maxCoeff(), lmin = l.minCoeff();
  return (epsilon / lmax) / (2.0 * lmax * std::sqrt(epsilon / lmin));
}

double rho_bound(const Mat& V, double epsilon) {
  if (!(epsilon > 0.0)) throw ArgumentError("epsilon must be positive");
  const Vec l = Eigen::SelfAdjointEigenSolver<Mat>(V).eigenvalues();
  if (!(l.minCoeff() > 0.0)) throw ArgumentError("V is not positive definite");
  const int d = static_cast<int>(l.size());
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < d; ++i) best = std::min(best, std::sqrt(epsilon) / (2.0 * std::pow(l[i], 1.5)));
  for (int i = 0; i < d; ++i) {
    for (int j = i + 1; j < d; ++j) {
      auto f = [&](double tj) {
        const double ti = std::max(0.0, (epsilon - l[j] * tj) / l[i]);
        return (ti + tj) / (2.0 * std::sqrt(l[i] * l[i] * ti + l[j] * l[j] * tj));
      };
      best = std::min(best, golden_min(f, 0.0, epsilon / l[j]));
    }
  }
  return best;
}

TargetSpec StableNeighborhood::target() const { return TargetSpec::ellipsoid(lin.z_star, V, epsilon); }

StableNeighborhood build_stable_neighborhood(const CanonicalModel& model, const SystemState& equilibrium,
                                             std::optional<Vec> u0, double margin, double epsilon_cap) {
  StableNeighborhood nb;
  nb.lin = linearize(model, equilibrium, std::move(u0));
  nb.C = stabilizing_feedback(nb.lin.A, nb.lin.B, margin);
  const Mat A_cl = nb.lin.A + nb.lin.B * nb.C;
  nb.closed_loop_abscissa = spectral_abscissa(A_cl);
  nb.V = lyapunov_V(A_cl);
  nb.lyapunov_residual =
      (A_cl.transpose() * nb.V + nb.V * A_cl + Mat::Identity(A_cl.rows(), A_cl.cols())).norm();
  nb.epsilon = pick_epsilon(nb.V, nb.C, model.box, nb.lin.u0, epsilon_cap);
  nb.rho = rho_bound(nb.V, nb.epsilon);
  return nb;
}

NeighborhoodCheck sample_neighborhood(const StableNeighborhood& nb, const ControlBox& box, int samples,
                                      std::uint64_t seed) {
  const int d = static_cast<int>(nb.V.rows());
  const Mat A_cl = nb.lin.A + nb.lin.B * nb.C;
  const Mat L = nb.V.llt().matrixL();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  auto unit = [&] {
    Vec z(d);
    for (int i = 0; i < d; ++i) z[i] = nd(rng);
    return Vec(z.normalized());
  };
  NeighborhoodCheck out;
  out.samples = samples;
  out.lyapunov_excess = -std::numeric_limits<double>::infinity();
  out.admissibility_excess = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < samples; ++k) {
    const Vec z = unit();
    out.lyapunov_excess = std::max(out.lyapunov_excess, (nb.V * z).dot(A_cl * z) + 0.5);
    const Vec zb = std::sqrt(nb.epsilon) * L.transpose().triangularView<Eigen::Upper>().solve(unit());
    const Vec u = nb.lin.u0 + nb.C * zb;
    out.admissibility_excess =
        std::max(out.admissibility_excess, std::max((u - box.hi).maxCoeff(), (box.lo - u).maxCoeff()));
  }
  return out;
}

NeighborhoodRun optimal_run_into(const CanonicalModel& model, const StableNeighborhood& nb, const SystemState& init,
                                 const SolveOptions& opts, double tol_H) {
  const TargetSpec target = nb.target();
  if (target.contains(pack(init))) throw ArgumentError("initial state already inside the neighborhood");
  NeighborhoodRun run;
  const OptimalResult best = solve_time_optimal(model, Dynamics::limit(), init, target, opts).best;
  run.result = polish_extremal(model, Dynamics::limit(), init, target, best);
  run.primal = integrate_limit(model, run.result.control.to_signal(model.box), run.result.T_opt, {}, init);
  const AdjointState terminal = transversality(pack(run.primal.states.back()), nb.lin.z_star, nb.V);
  run.adjoint = integrate_adjoint_limit(model, run.primal, terminal);
  run.report = verify_theorem2(model, run.primal, run.adjoint);
  run.rho_satisfied = run.report.H_bar >= nb.rho - tol_H;
  return run;
}

}  // namespace backlash

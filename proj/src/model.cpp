#include "backlash/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace backlash {

bool SystemState::finite() const {
  return x.allFinite() && v.allFinite() && std::isfinite(y) && std::isfinite(w);
}

Vec pack(const SystemState& s) {
  const StateLayout L{s.n()};
  Vec z(L.dim());
  z.segment(L.x(), L.n) = s.x;
  z[L.y()] = s.y;
  z.segment(L.v(), L.n) = s.v;
  z[L.w()] = s.w;
  return z;
}

SystemState unpack(const Eigen::Ref<const Vec>& z, int n) {
  const StateLayout L{n};
  if (z.size() < L.dim()) throw ContractViolation("unpack: packed state too short");
  SystemState s;
  s.x = z.segment(L.x(), n);
  s.y = z[L.y()];
  s.v = z.segment(L.v(), n);
  s.w = z[L.w()];
  return s;
}

bool ControlBox::contains(const Vec& u, double tol) const {
  if (u.size() != lo.size()) return false;
  for (int i = 0; i < u.size(); ++i) {
    if (u[i] < lo[i] - tol || u[i] > hi[i] + tol) return false;
  }
  return true;
}

Vec ControlBox::clamp(const Vec& u) const { return u.cwiseMax(lo).cwiseMin(hi); }

void CanonicalModel::validate() const {
  if (n < 0 || m <= 0) throw ContractViolation("model: invalid dimensions");
  if (!terms) throw ContractViolation("model: structural maps missing");
  if (box.dim() != m || box.hi.size() != m) throw ContractViolation("model: control box has wrong dimension");
  for (int i = 0; i < m; ++i) {
    if (!(box.lo[i] <= box.hi[i]) || !std::isfinite(box.lo[i]) || !std::isfinite(box.hi[i])) {
      throw ContractViolation("model: control box must be nonempty and bounded");
    }
  }
  if (!(growth_M > 0.0)) throw ContractViolation("model: growth constant must be positive");
}

namespace {

void check_dims(const CanonicalModel& model, const SystemState& s, const Vec& u) {
  if (s.x.size() != model.n || s.v.size() != model.n || u.size() != model.m) {
    std::ostringstream msg;
    msg << "dimension mismatch: model (n=" << model.n << ", m=" << model.m << ") got x=" << s.x.size()
        << ", v=" << s.v.size() << ", u=" << u.size();
    throw ContractViolation(msg.str());
  }
}

}  // namespace

ForceValues eval_fg(const CanonicalModel& model, const SystemState& s, const Vec& u) {
  check_dims(model, s, u);
  const AffineTerms t = model.terms(s.x, s.y, s.v);
  ForceValues out;
  out.f = t.f1 + t.f2 * s.w;
  if (model.n > 0) out.f.noalias() += t.f3 * u;
  out.g = t.g1 + t.g2 * s.w + t.g3.dot(u);
  return out;
}

Vec eval_f(const CanonicalModel& model, const SystemState& s, const Vec& u) {
  return eval_fg(model, s, u).f;
}

double eval_g(const CanonicalModel& model, const SystemState& s, const Vec& u) {
  return eval_fg(model, s, u).g;
}

ModelJacobian finite_difference_jacobian(const CanonicalModel& model, const SystemState& s,
                                         const Vec& u, double step) {
  const StateLayout L{model.n};
  const Vec z0 = pack(s);
  ModelJacobian J;
  J.df = Mat::Zero(model.n, L.dim());
  J.dg = Vec::Zero(L.dim());
  for (int j = 0; j < L.dim(); ++j) {
    const double h = step * (1.0 + std::abs(z0[j]));
    Vec zp = z0, zm = z0;
    zp[j] += h;
    zm[j] -= h;
    const ForceValues fp = eval_fg(model, unpack(zp, model.n), u);
    const ForceValues fm = eval_fg(model, unpack(zm, model.n), u);
    if (model.n > 0) J.df.col(j) = (fp.f - fm.f) / (2.0 * h);
    J.dg[j] = (fp.g - fm.g) / (2.0 * h);
  }
  return J;
}

ModelJacobian model_jacobian(const CanonicalModel& model, const SystemState& s, const Vec& u) {
  if (model.jacobian) {
    check_dims(model, s, u);
    return model.jacobian(s, u);
  }
  return finite_difference_jacobian(model, s, u);
}

CanonicalModel builtin_example1() {
  CanonicalModel model;
  model.name = "ex1";
  model.n = 0;
  model.m = 1;
  model.terms = [](const Vec&, double, const Vec&) {
    AffineTerms t;
    t.f1 = Vec::Zero(0);
    t.f2 = Vec::Zero(0);
    t.f3 = Mat::Zero(0, 1);
    t.g1 = 0.0;
    t.g2 = 0.0;
    t.g3 = Vec::Ones(1);
    return t;
  };
  model.jacobian = [](const SystemState&, const Vec&) {
    ModelJacobian J;
    J.df = Mat::Zero(0, 2);
    J.dg = Vec::Zero(2);
    return J;
  };
  model.box.lo = Vec::Constant(1, -1.0);
  model.box.hi = Vec::Constant(1, 1.0);
  model.growth_M = 1.0;
  return model;
}

Example2Coefficients example2_coefficients(double mass_M, double k, double alpha, double beta) {
  if (!(mass_M > 0.0)) throw ArgumentError("mass_M must be positive");
  if (!(k > 0.0)) throw ArgumentError("k must be positive");
  if (!(alpha > 0.0)) throw ArgumentError("alpha must be positive");
  if (!(beta >= 0.0)) throw ArgumentError("beta must be nonnegative");
  Example2Coefficients c;
  c.a = k / (mass_M + 1.0);
  c.b = alpha * (mass_M + 1.0) / mass_M;
  c.c = beta / (mass_M + 1.0);
  return c;
}

CanonicalModel example2_from_coefficients(const Example2Coefficients& coeffs) {
  const double a = coeffs.a, b = coeffs.b, c = coeffs.c;
  if (!(a > 0.0) || !(b >= 0.0) || !(c >= 0.0)) {
    throw ArgumentError("example 2 coefficients require a > 0, b >= 0, c >= 0");
  }
  CanonicalModel model;
  model.name = "ex2";
  model.n = 1;
  model.m = 1;
  // f = -a(x-y) - c(v-w) + u,  g = a(x-y) + c(v-w) - b w + u
  model.terms = [a, c, b](const Vec& x, double y, const Vec& v) {
    AffineTerms t;
    const double spring = a * (x[0] - y);
    t.f1 = Vec::Constant(1, -spring - c * v[0]);
    t.f2 = Vec::Constant(1, c);
    t.f3 = Mat::Ones(1, 1);
    t.g1 = spring + c * v[0];
    t.g2 = -c - b;
    t.g3 = Vec::Ones(1);
    return t;
  };
  model.jacobian = [a, b, c](const SystemState&, const Vec&) {
    ModelJacobian J;
    J.df.resize(1, 4);
    J.df << -a, a, -c, c;
    J.dg.resize(4);
    J.dg << a, -a, c, -c - b;
    return J;
  };
  model.box.lo = Vec::Constant(1, -1.0);
  model.box.hi = Vec::Constant(1, 1.0);
  model.growth_M = std::max({1.0, a, b + c});
  return model;
}

CanonicalModel builtin_example2(double mass_M, double k, double alpha, double beta) {
  return example2_from_coefficients(example2_coefficients(mass_M, k, alpha, beta));
}

GrowthReport check_growth_bound(const CanonicalModel& model, std::span<const GrowthSample> samples,
                                double M) {
  if (samples.empty()) throw ArgumentError("growth check needs at least one sample");
  if (!(M > 0.0)) throw ArgumentError("growth constant must be positive");
  GrowthReport report;
  for (const auto& [s, u] : samples) {
    const ForceValues fg = eval_fg(model, s, u);
    const double scale = 1.0 + s.x.norm() + std::abs(s.y) + s.v.norm() + std::abs(s.w);
    report.max_ratio = std::max({report.max_ratio, fg.f.norm() / scale, std::abs(fg.g) / scale});
  }
  report.pass = report.max_ratio <= M;
  return report;
}

CanonicalModel model_from_id(const std::string& id, double mass_M, double k, double alpha,
                             double beta) {
  if (id == "ex1") return builtin_example1();
  if (id == "ex2") return builtin_example2(mass_M, k, alpha, beta);
  throw ArgumentError("unknown model id '" + id + "' (expected ex1 or ex2)");
}

}  // namespace backlash

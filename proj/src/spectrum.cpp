#include "backlash/adjoint.hpp"

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/multiprecision/eigen.hpp>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <numeric>

namespace backlash {

namespace {

using Real = boost::multiprecision::cpp_bin_float_50;
using Complex = std::complex<Real>;
using Mat4 = Eigen::Matrix<Real, 4, 4>;

Mat4 contact_matrix(const Real& a, const Real& b, const Real& c) {
  Mat4 A;
  A << 0, 0, a, -a,
       0, -b, -a, a + 2 * c * b + b * b,
       -1, 0, c, -c,
       0, -1, -c, c + b;
  return A;
}

/// Roots of lambda^2 + p lambda + q.
std::array<Complex, 2> quadratic(const Real& p, const Real& q) {
  const Real disc = p * p / 4 - q;
  const Real mid = -p / 2;
  if (disc >= 0) {
    const Real s = sqrt(disc);
    return {Complex(mid + s, 0), Complex(mid - s, 0)};
  }
  const Real s = sqrt(-disc);
  return {Complex(mid, s), Complex(mid, -s)};
}

Real modulus(const Complex& z) { return sqrt(z.real() * z.real() + z.imag() * z.imag()); }

Real best_pairing(const std::array<Complex, 4>& ev, const std::array<Complex, 4>& roots) {
  std::array<int, 4> perm{};
  std::iota(perm.begin(), perm.end(), 0);
  Real best = -1;
  do {
    Real worst = 0;
    for (int i = 0; i < 4; ++i) {
      const Complex diff(ev[i].real() - roots[perm[i]].real(), ev[i].imag() - roots[perm[i]].imag());
      worst = std::max(worst, modulus(diff));
    }
    if (best < 0 || worst < best) best = worst;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::complex<double> to_double(const Complex& z) {
  return {static_cast<double>(z.real()), static_cast<double>(z.imag())};
}

}  // namespace

Mat example2_contact_matrix(double a, double b, double c) {
  Mat A(4, 4);
  A << 0, 0, a, -a,
       0, -b, -a, a + 2 * c * b + b * b,
       -1, 0, c, -c,
       0, -1, -c, c + b;
  return A;
}

SpectrumCheck example2_contact_spectrum(double a, double b, double c) {
  if (!(a > 0.0) || !(b >= 0.0) || !(c >= 0.0)) {
    throw ArgumentError("contact spectrum requires a > 0, b >= 0, c >= 0");
  }
  const Real A_ = a, B_ = b, C_ = c;
  Eigen::EigenSolver<Mat4> solver(contact_matrix(A_, B_, C_), false);
  if (solver.info() != Eigen::Success) throw Error("eigenvalue iteration did not converge");
  std::array<Complex, 4> ev;
  for (int i = 0; i < 4; ++i) ev[i] = solver.eigenvalues()[i];

  const auto quad = quadratic(-2 * C_, 2 * A_);
  const auto zero_pair = quadratic(Real(0), B_ * C_);
  const std::array<Complex, 4> stated{Complex(0, 0), Complex(0, 0), quad[0], quad[1]};
  const std::array<Complex, 4> factored{zero_pair[0], zero_pair[1], quad[0], quad[1]};

  SpectrumCheck out;
  for (int i = 0; i < 4; ++i) {
    out.eigenvalues.push_back(to_double(ev[i]));
    out.stated_roots.push_back(to_double(stated[i]));
    out.factored_roots.push_back(to_double(factored[i]));
  }
  out.stated_gap = static_cast<double>(best_pairing(ev, stated));
  out.factored_gap = static_cast<double>(best_pairing(ev, factored));
  return out;
}

}  // namespace backlash

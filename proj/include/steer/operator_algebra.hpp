#pragma once

// Dense complex kernel: operators on a d-dimensional Hilbert space, their
// row-stacked vectorization |A>> = sum_ij a_ij |i>|j>, and superoperators on
// the d^2-dimensional Hilbert-Schmidt space. Under this convention the map
// rho -> X rho Y is the matrix kron(X, Y^T).

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "steer/error.hpp"
#include "steer/tolerances.hpp"

namespace steer {

using Complex = std::complex<double>;
using Index = Eigen::Index;
using Operator = Eigen::MatrixXcd;
using SuperOperator = Eigen::MatrixXcd;
using HSVector = Eigen::VectorXcd;

inline constexpr Complex kI{0.0, 1.0};
inline constexpr double kPi = 3.14159265358979323846;

inline Operator identity(Index dim) { return Operator::Identity(dim, dim); }

inline void require_square(const Operator& a, const char* what) {
  if (a.rows() != a.cols()) {
    throw Error(ErrorCode::DimensionMismatch, std::string(what) + " must be square");
  }
}

inline double frobenius(const Operator& a) { return a.norm(); }

inline Operator commutator(const Operator& a, const Operator& b) { return a * b - b * a; }

inline double hermiticity_residual(const Operator& a) { return (a - a.adjoint()).norm(); }

inline bool is_hermitian(const Operator& a, double tol = kDefaultTolerances.hermitian_input) {
  return a.rows() == a.cols() && hermiticity_residual(a) <= tol;
}

inline Operator hermitize(const Operator& a) { return 0.5 * (a + a.adjoint()); }

inline double unitarity_residual(const Operator& u) {
  return (u.adjoint() * u - identity(u.rows())).norm();
}

/// Standard Kronecker layout: (a (x) b)[(i,k),(j,l)] = a[i,j] b[k,l].
inline Operator kron(const Operator& a, const Operator& b) {
  const Index ra = a.rows(), ca = a.cols(), rb = b.rows(), cb = b.cols();
  Operator out(ra * rb, ca * cb);
  for (Index i = 0; i < ra; ++i) {
    for (Index j = 0; j < ca; ++j) {
      out.block(i * rb, j * cb, rb, cb) = a(i, j) * b;
    }
  }
  return out;
}

inline Operator kron_all(std::span<const Operator> factors) {
  if (factors.empty()) return identity(1);
  Operator out = factors.front();
  for (std::size_t k = 1; k < factors.size(); ++k) out = kron(out, factors[k]);
  return out;
}

inline HSVector vec(const Operator& a) {
  require_square(a, "vec operand");
  const Index d = a.rows();
  HSVector v(d * d);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < d; ++j) v(i * d + j) = a(i, j);
  }
  return v;
}

inline Index hs_dimension_root(Index n) {
  const auto d = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(n))));
  if (d * d != n) {
    throw Error(ErrorCode::DimensionMismatch,
                "length " + std::to_string(n) + " is not a perfect square");
  }
  return d;
}

inline Operator devec(const HSVector& v) {
  const Index d = hs_dimension_root(v.size());
  Operator a(d, d);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < d; ++j) a(i, j) = v(i * d + j);
  }
  return a;
}

/// <<A|B>> = Tr(A^dagger B).
inline Complex hs_inner(const Operator& a, const Operator& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "hs_inner operands differ in shape");
  }
  return a.conjugate().cwiseProduct(b).sum();
}

/// Superoperator of rho -> x rho y.
inline SuperOperator sandwich(const Operator& x, const Operator& y) {
  return kron(x, y.transpose());
}

/// Superoperator of rho -> m rho m^dagger, i.e. m (x) m^*.
inline SuperOperator conjugation(const Operator& m) { return kron(m, m.conjugate()); }

inline Operator apply(const SuperOperator& phi, const Operator& rho) {
  if (phi.cols() != rho.size()) {
    throw Error(ErrorCode::DimensionMismatch, "superoperator does not match operator size");
  }
  return devec(phi * vec(rho));
}

/// Row vector <<I| Phi, i.e. the functional rho -> Tr(Phi(rho)).
inline Eigen::RowVectorXcd trace_functional(const SuperOperator& phi) {
  const Index d = hs_dimension_root(phi.rows());
  return vec(identity(d)).adjoint() * phi;
}

/// e^{-i h t} for Hermitian h, via the spectral decomposition so the result is
/// unitary to rounding.
inline Operator expm(const Operator& h, double t,
                     double hermitian_tol = kDefaultTolerances.hermitian_input) {
  require_square(h, "generator");
  if (!is_hermitian(h, hermitian_tol)) {
    throw Error(ErrorCode::NonHermitianInput,
                "generator Hermiticity residual " + std::to_string(hermiticity_residual(h)));
  }
  Eigen::SelfAdjointEigenSolver<Operator> es(hermitize(h));
  const Eigen::VectorXcd phases =
      (es.eigenvalues().cast<Complex>() * Complex(0.0, -t)).array().exp().matrix();
  return es.eigenvectors() * phases.asDiagonal() * es.eigenvectors().adjoint();
}

/// e^{L t} for a general (non-normal) generator, by scaling-and-squaring with a
/// Pade approximant.
inline SuperOperator expm_general(const SuperOperator& l, double t) {
  require_square(l, "generator");
  const SuperOperator scaled = l * Complex(t, 0.0);
  return scaled.exp();
}

struct SpectralDiagnostics {
  bool clustered = false;   // some pair of eigenvalues closer than the gap tolerance
  bool defective = false;   // eigenvector matrix numerically singular
  double min_gap = 0.0;
  double condition = 1.0;   // 2-norm condition number of the right eigenvector matrix
};

struct EigenDecomposition {
  Eigen::VectorXcd values;   // sorted: |lambda| descending, then Re, then Im descending
  Eigen::MatrixXcd right;    // columns |R_i>>
  Eigen::MatrixXcd left;     // columns |L_i>> with <<L_i|R_j>> = delta_ij
  SpectralDiagnostics diagnostics;
};

namespace detail {

inline bool spectral_order(const Complex& a, const Complex& b) {
  const auto ka = std::llround(std::abs(a) * 1e12);
  const auto kb = std::llround(std::abs(b) * 1e12);
  if (ka != kb) return ka > kb;
  if (a.real() != b.real()) return a.real() > b.real();
  return a.imag() > b.imag();
}

}  // namespace detail

inline std::vector<Index> spectral_permutation(const Eigen::VectorXcd& values) {
  std::vector<Index> order(static_cast<std::size_t>(values.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) {
    return detail::spectral_order(values(i), values(j));
  });
  return order;
}

inline Eigen::VectorXcd sorted_eigenvalues(const SuperOperator& m) {
  require_square(m, "eigenvalue input");
  Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(m, false);
  const Eigen::VectorXcd raw = es.eigenvalues();
  Eigen::VectorXcd out(raw.size());
  const auto order = spectral_permutation(raw);
  for (std::size_t k = 0; k < order.size(); ++k) out(static_cast<Index>(k)) = raw(order[k]);
  return out;
}

/// General eigendecomposition with biorthonormal left vectors. Clustered or
/// defective spectra are reported in the diagnostics, never repaired.
inline EigenDecomposition eig_general(const SuperOperator& m,
                                      const Tolerances& tol = kDefaultTolerances) {
  require_square(m, "eigen input");
  Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(m, true);
  const auto order = spectral_permutation(es.eigenvalues());
  const Index n = m.rows();

  EigenDecomposition out;
  out.values.resize(n);
  out.right.resize(n, n);
  for (Index k = 0; k < n; ++k) {
    const Index src = order[static_cast<std::size_t>(k)];
    out.values(k) = es.eigenvalues()(src);
    out.right.col(k) = es.eigenvectors().col(src);
  }

  double min_gap = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      min_gap = std::min(min_gap, std::abs(out.values(i) - out.values(j)));
    }
  }
  out.diagnostics.min_gap = n > 1 ? min_gap : 0.0;
  out.diagnostics.clustered = n > 1 && min_gap < tol.eigen_gap;

  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(out.right);
  const auto& sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  out.diagnostics.condition =
      smin > 0.0 ? sv(0) / smin : std::numeric_limits<double>::infinity();
  out.diagnostics.defective = !(out.diagnostics.condition <= tol.eigen_condition);

  // Rows of R^{-1} are the dual functionals; store them as kets.
  out.left = out.right.fullPivLu().inverse().adjoint();
  return out;
}

/// Eigenvalues of a Hermitian matrix, ascending.
inline Eigen::VectorXd hermitian_eigenvalues(const Operator& a) {
  Eigen::SelfAdjointEigenSolver<Operator> es(hermitize(a), Eigen::EigenvaluesOnly);
  return es.eigenvalues();
}

inline Operator psd_sqrt(const Operator& rho, double psd_tol = kDefaultTolerances.psd) {
  require_square(rho, "psd_sqrt input");
  Eigen::SelfAdjointEigenSolver<Operator> es(hermitize(rho));
  const Eigen::VectorXd& w = es.eigenvalues();
  if (w.size() > 0 && w(0) < -psd_tol) {
    throw Error(ErrorCode::NotPSD, "minimum eigenvalue " + std::to_string(w(0)));
  }
  const Eigen::VectorXcd root = w.cwiseMax(0.0).cwiseSqrt().cast<Complex>();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().adjoint();
}

/// Tr sqrt(sqrt(rho) sigma sqrt(rho)) given a precomputed sqrt(rho).
inline double fidelity_with_root(const Operator& sqrt_rho, const Operator& sigma) {
  const Operator inner = sqrt_rho * sigma * sqrt_rho;
  const Eigen::VectorXd w = hermitian_eigenvalues(inner);
  double f = 0.0;
  for (Index k = 0; k < w.size(); ++k) f += std::sqrt(std::max(w(k), 0.0));
  return std::clamp(f, 0.0, 1.0);
}

/// F(rho_fix, rho) = Tr sqrt(sqrt(rho) rho_fix sqrt(rho)).
inline double fidelity(const Operator& rho_fix, const Operator& rho,
                       double psd_tol = kDefaultTolerances.psd) {
  if (rho_fix.rows() != rho.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "fidelity operands differ in dimension");
  }
  psd_sqrt(rho_fix, psd_tol);  // validates the first argument as well
  return fidelity_with_root(psd_sqrt(rho, psd_tol), rho_fix);
}

inline double trace_distance(const Operator& a, const Operator& b) {
  const Eigen::VectorXd w = hermitian_eigenvalues(a - b);
  return 0.5 * w.cwiseAbs().sum();
}

struct DensityCheck {
  double hermiticity = 0.0;
  double trace_error = 0.0;
  double min_eigenvalue = 0.0;
};

inline DensityCheck check_density(const Operator& rho) {
  DensityCheck c;
  c.hermiticity = hermiticity_residual(rho);
  c.trace_error = std::abs(rho.trace() - Complex(1.0, 0.0));
  const Eigen::VectorXd w = hermitian_eigenvalues(rho);
  c.min_eigenvalue = w.size() ? w(0) : 0.0;
  return c;
}

inline bool is_density(const Operator& rho, double hermitian_tol = 1e-10,
                       double trace_tol = 1e-12, double psd_tol = 1e-10) {
  if (rho.rows() != rho.cols()) return false;
  const DensityCheck c = check_density(rho);
  return c.hermiticity <= hermitian_tol && c.trace_error <= trace_tol &&
         c.min_eigenvalue >= -psd_tol;
}

inline Operator maximally_mixed(Index dim) {
  return identity(dim) / static_cast<double>(dim);
}

inline Operator basis_projector(Index dim, Index k) {
  Operator p = Operator::Zero(dim, dim);
  p(k, k) = 1.0;
  return p;
}

}  // namespace steer

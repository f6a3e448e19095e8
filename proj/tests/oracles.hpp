#pragma once

// Independent reference computations for the tests. Deliberately naive.

#include <cmath>
#include <complex>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using C = std::complex<double>;
using M = Eigen::MatrixXcd;

inline M kron(const M& a, const M& b) {
  M out = M::Zero(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      for (Eigen::Index k = 0; k < b.rows(); ++k)
        for (Eigen::Index l = 0; l < b.cols(); ++l) out(i * b.rows() + k, j * b.cols() + l) = a(i, j) * b(k, l);
  return out;
}

// exp(a) by scaling and squaring around a plain Taylor series
inline M expm_taylor(const M& a, int terms = 30) {
  int s = 0;
  double n = a.cwiseAbs().rowwise().sum().maxCoeff();
  while (n > 0.5) {
    n /= 2.0;
    ++s;
  }
  const M x = a / std::pow(2.0, s);
  M term = M::Identity(a.rows(), a.cols());
  M sum = term;
  for (int k = 1; k < terms; ++k) {
    term = term * x / static_cast<double>(k);
    sum += term;
  }
  for (int i = 0; i < s; ++i) sum = sum * sum;
  return sum;
}

// Fourier coefficient of the +-1 square wave switching at t = T/4 and 3T/4 (cos series),
// by midpoint quadrature.
inline double square_wave_cosine_coefficient(int n, int samples = 200000) {
  double acc = 0.0;
  for (int i = 0; i < samples; ++i) {
    const double x = (i + 0.5) / samples;  // one period
    const double f = (x < 0.25 || x >= 0.75) ? 1.0 : -1.0;
    acc += f * std::cos(2.0 * M_PI * n * x);
  }
  return 2.0 * acc / samples;
}

// Channel applied by explicit Kraus sums rather than superoperators.
inline M apply_kraus(const std::vector<M>& ks, const M& rho) {
  M out = M::Zero(rho.rows(), rho.cols());
  for (const auto& k : ks) out += k * rho * k.adjoint();
  return out;
}

inline M random_hermitian(Eigen::Index d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, 1.0);
  M a(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) a(i, j) = C(g(rng), g(rng));
  return scale * (a + a.adjoint()) / 2.0;
}

inline M random_density(Eigen::Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  M a(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) a(i, j) = C(g(rng), g(rng));
  M r = a * a.adjoint();
  return r / r.trace().real();
}

// Binomial pmf through log-gamma.
inline double binomial_pmf(int m, int k, double p) {
  if (p <= 0.0) return k == 0 ? 1.0 : 0.0;
  if (p >= 1.0) return k == m ? 1.0 : 0.0;
  return std::exp(std::lgamma(m + 1.0) - std::lgamma(k + 1.0) - std::lgamma(m - k + 1.0) + k * std::log(p) +
                  (m - k) * std::log1p(-p));
}

}  // namespace oracle

#pragma once

// The environment channel induced by one Ramsey cycle, and its asymptotics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "steer/error.hpp"
#include "steer/model.hpp"
#include "steer/operator_algebra.hpp"
#include "steer/tolerances.hpp"

namespace steer {

struct KrausPair {
  Operator m0;
  Operator m1;
  double t = 0.0;
  double phase = 0.0;

  Index dim() const { return m0.rows(); }
  const Operator& operator[](int alpha) const { return alpha == 0 ? m0 : m1; }
};

struct EvolutionPair {
  Operator u0;  // e^{-i(H_e + B) t}
  Operator u1;  // e^{-i(H_e - B) t}
};

inline EvolutionPair conditional_evolutions(const ModelOperators& ops, double t) {
  validate_model(ops);
  return {expm(ops.he + ops.b, t), expm(ops.he - ops.b, t)};
}

/// M_{0,1} = (U0 -+ e^{i dphi} U1) / 2.
inline KrausPair kraus_from_model(const ModelOperators& ops, double t, double phase) {
  const EvolutionPair u = conditional_evolutions(ops, t);
  const Complex w = std::polar(1.0, phase);
  return {0.5 * (u.u0 - w * u.u1), 0.5 * (u.u0 + w * u.u1), t, phase};
}

inline double kraus_completeness_residual(const KrausPair& k) {
  return (k.m0.adjoint() * k.m0 + k.m1.adjoint() * k.m1 - identity(k.dim())).norm();
}

inline SuperOperator natural_representation(const KrausPair& k) {
  return conjugation(k.m0) + conjugation(k.m1);
}

/// (U0 (x) U0^* + U1 (x) U1^*) / 2, the second construction path.
inline SuperOperator natural_representation_from_unitaries(const ModelOperators& ops, double t) {
  const EvolutionPair u = conditional_evolutions(ops, t);
  return 0.5 * (conjugation(u.u0) + conjugation(u.u1));
}

/// R_phi(theta) = exp(-i (cos phi sx + sin phi sy) theta / 2).
inline Operator qubit_rotation(double phi, double theta) {
  const Operator n = std::cos(phi) * spin::sx() + std::sin(phi) * spin::sy();
  return expm(n, theta / 2.0);
}

/// Dilation path: qubit prepared by R_dphi(pi/2)|0>, joint evolution under
/// sigma_z (x) B + I (x) H_e, readout rotation R_0(pi/2), partial trace over the
/// qubit. Built column by column from the action on matrix units.
inline SuperOperator stinespring_channel(const ModelOperators& ops, double t, double phase) {
  validate_model(ops);
  const Index d = ops.dim();
  const Operator h = kron(spin::sz(), ops.b) + kron(identity(2), ops.he);
  const Operator w = kron(qubit_rotation(0.0, kPi / 2.0), identity(d)) * expm(h, t);
  Eigen::VectorXcd zero = Eigen::VectorXcd::Zero(2);
  zero(0) = 1.0;
  const Eigen::VectorXcd psi = qubit_rotation(phase, kPi / 2.0) * zero;
  const Operator prep = kron(Operator(psi), identity(d));  // 2d x d isometry
  const Operator v = w * prep;

  SuperOperator phi(d * d, d * d);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < d; ++j) {
      const Operator joint = v.col(i) * v.col(j).adjoint();
      const Operator reduced = joint.topLeftCorner(d, d) + joint.bottomRightCorner(d, d);
      phi.col(i * d + j) = vec(reduced);
    }
  }
  return phi;
}

/// Choi matrix sum_ij E_ij (x) Phi(E_ij), obtained by reshuffling.
inline Operator choi_matrix(const SuperOperator& phi) {
  require_square(phi, "superoperator");
  const Index d = hs_dimension_root(phi.rows());
  Operator c(d * d, d * d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j)
      for (Index a = 0; a < d; ++a)
        for (Index b = 0; b < d; ++b) c(i * d + a, j * d + b) = phi(a * d + b, i * d + j);
  return c;
}

struct CptpReport {
  double trace_residual = 0.0;    // || <<I| Phi - <<I| ||
  double unital_residual = 0.0;   // || Phi|I>> - |I>> ||
  double choi_min_eigenvalue = 0.0;
  double choi_hermiticity = 0.0;
  bool trace_preserving = false;
  bool completely_positive = false;

  bool is_channel() const { return trace_preserving && completely_positive; }
};

inline CptpReport cptp_report(const SuperOperator& phi, double tp_tol = 1e-8,
                              double choi_tol = 1e-8) {
  require_square(phi, "superoperator");
  const Index d = hs_dimension_root(phi.rows());
  const HSVector id = vec(identity(d));
  CptpReport r;
  r.trace_residual = (id.adjoint() * phi - id.adjoint()).norm();
  r.unital_residual = (phi * id - id).norm();
  const Operator c = choi_matrix(phi);
  r.choi_hermiticity = hermiticity_residual(c);
  r.choi_min_eigenvalue = hermitian_eigenvalues(c)(0);
  r.trace_preserving = r.trace_residual <= tp_tol;
  r.completely_positive = r.choi_min_eigenvalue >= -choi_tol && r.choi_hermiticity <= tp_tol;
  return r;
}

/// Throws NotAChannel with the residuals when the map is not CPTP.
inline CptpReport validate_cptp(const SuperOperator& phi, double tp_tol = 1e-8,
                                double choi_tol = 1e-8) {
  const CptpReport r = cptp_report(phi, tp_tol, choi_tol);
  if (!r.is_channel()) {
    throw Error(ErrorCode::NotAChannel,
                "trace residual " + std::to_string(r.trace_residual) + ", min Choi eigenvalue " +
                    std::to_string(r.choi_min_eigenvalue));
  }
  return r;
}

struct FixedPoints {
  std::vector<Operator> projectors;   // Pi_j, ordered by peak center
  std::vector<Index> ranks;
  std::vector<Operator> states;       // Pi_j / d_j
  std::vector<Operator> observables;  // Pi_j
  std::vector<double> centers;        // <f1_j>* = Tr(M1 rho_j M1^dagger)
  Eigen::MatrixXcd commutant_basis;   // orthonormal columns |N_k>>
  bool abelian = true;
  double nullspace_gap = 0.0;         // smallest nonzero singular value / scale
  double block_gap = 0.0;             // smallest relative eigenvalue gap between blocks

  std::size_t count() const { return projectors.size(); }
};

namespace detail {

inline Eigen::MatrixXcd commutation_system(const std::vector<Operator>& ms) {
  const Index d = ms.front().rows();
  const Index n = d * d;
  Eigen::MatrixXcd a(static_cast<Index>(ms.size()) * n, n);
  for (std::size_t k = 0; k < ms.size(); ++k) {
    a.middleRows(static_cast<Index>(k) * n, n) =
        kron(identity(d), ms[k].transpose()) - kron(ms[k], identity(d));
  }
  return a;
}

struct Partition {
  std::vector<Operator> projectors;
  std::vector<Index> ranks;
  double gap = 0.0;
};

inline Partition split_by_random_element(const std::vector<Operator>& basis, std::mt19937_64& rng,
                                         double cluster_tol) {
  const Index d = basis.front().rows();
  std::normal_distribution<double> g;
  Operator h = Operator::Zero(d, d);
  for (const auto& nk : basis) {
    const Complex c(g(rng), g(rng));
    h += c * nk + std::conj(c) * nk.adjoint();
  }
  Eigen::SelfAdjointEigenSolver<Operator> es(hermitize(h));
  const Eigen::VectorXd& w = es.eigenvalues();
  const double spread = std::max(w.cwiseAbs().maxCoeff(), 1e-300);

  Partition p;
  p.gap = std::numeric_limits<double>::infinity();
  Index start = 0;
  for (Index i = 1; i <= d; ++i) {
    const bool cut = i == d || (w(i) - w(i - 1)) > cluster_tol * spread;
    if (i < d && cut) p.gap = std::min(p.gap, (w(i) - w(i - 1)) / spread);
    if (!cut) continue;
    const auto v = es.eigenvectors().middleCols(start, i - start);
    p.projectors.push_back(v * v.adjoint());
    p.ranks.push_back(i - start);
    start = i;
  }
  return p;
}

/// Abelian commutants have unique minimal projectors and are compared
/// elementwise; otherwise only the rank profile is canonical.
inline bool same_partition(const Partition& a, const Partition& b, double tol, bool abelian) {
  if (a.projectors.size() != b.projectors.size()) return false;
  if (!abelian) {
    auto ra = a.ranks, rb = b.ranks;
    std::sort(ra.begin(), ra.end());
    std::sort(rb.begin(), rb.end());
    return ra == rb;
  }
  for (const auto& pa : a.projectors) {
    bool found = false;
    for (const auto& pb : b.projectors) {
      if ((pa - pb).norm() < tol) {
        found = true;
        break;
      }
    }
    if (!found) return false;
  }
  return true;
}

inline Index first_significant_index(const Operator& p) {
  for (Index i = 0; i < p.rows(); ++i) {
    if (p(i, i).real() > 1e-6) return i;
  }
  return p.rows();
}

}  // namespace detail

/// Fixed points of a unital channel through its commutant: the common
/// nullspace of X -> [X, M] over the Kraus operators and their adjoints.
/// Minimal projectors come from the spectrum of a random Hermitian element of
/// that algebra; several draws must agree.
inline FixedPoints fixed_points(const KrausPair& k, const Tolerances& tol = kDefaultTolerances,
                                int draws = 3, std::uint64_t seed = 0x5eed) {
  const Index d = k.dim();
  const std::vector<Operator> ms{k.m0, k.m1, k.m0.adjoint(), k.m1.adjoint()};
  const Eigen::MatrixXcd a = detail::commutation_system(ms);
  Eigen::BDCSVD<Eigen::MatrixXcd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd& s = svd.singularValues();
  const Index n = d * d;
  const double scale = std::max(1.0, s(0));

  Index nullity = 0;
  for (Index i = n - 1; i >= 0 && s(i) <= tol.nullspace * scale; --i) ++nullity;
  FixedPoints fp;
  fp.nullspace_gap = nullity < n ? s(n - nullity - 1) / scale : std::numeric_limits<double>::infinity();
  if (nullity == 0 || fp.nullspace_gap < tol.nullspace_gap) {
    throw Error(ErrorCode::NumericalDegeneracy,
                "commutant dimension ambiguous: nullity " + std::to_string(nullity) +
                    ", next singular value " + std::to_string(fp.nullspace_gap));
  }
  fp.commutant_basis = svd.matrixV().rightCols(nullity);

  std::vector<Operator> basis;
  for (Index c = 0; c < nullity; ++c) basis.push_back(devec(fp.commutant_basis.col(c)));
  for (std::size_t i = 0; i < basis.size() && fp.abelian; ++i) {
    for (std::size_t j = i + 1; j < basis.size(); ++j) {
      if (commutator(basis[i], basis[j]).norm() > 1e-8) {
        fp.abelian = false;
        break;
      }
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<detail::Partition> trials;
  for (int r = 0; r < draws; ++r) {
    trials.push_back(detail::split_by_random_element(basis, rng, tol.cluster));
  }
  const detail::Partition* chosen = nullptr;
  for (std::size_t i = 0; i < trials.size() && !chosen; ++i) {
    int votes = 0;
    for (const auto& other : trials) votes += detail::same_partition(trials[i], other, 1e-6, fp.abelian) ? 1 : 0;
    if (2 * votes > draws) chosen = &trials[i];
  }
  if (!chosen) {
    throw Error(ErrorCode::NumericalDegeneracy, "random commutant draws disagree on the block structure");
  }
  fp.block_gap = chosen->gap;

  std::vector<std::size_t> order(chosen->projectors.size());
  std::vector<double> centers(order.size());
  std::vector<Index> firsts(order.size());
  for (std::size_t j = 0; j < order.size(); ++j) {
    order[j] = j;
    const Operator& p = chosen->projectors[j];
    centers[j] = (k.m1 * p * k.m1.adjoint()).trace().real() / static_cast<double>(chosen->ranks[j]);
    firsts[j] = detail::first_significant_index(p);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (std::abs(centers[x] - centers[y]) > 1e-9) return centers[x] < centers[y];
    return firsts[x] < firsts[y];
  });
  for (std::size_t j : order) {
    const Operator p = hermitize(chosen->projectors[j]);
    const auto rank = chosen->ranks[j];
    fp.projectors.push_back(p);
    fp.ranks.push_back(rank);
    fp.states.push_back(p / static_cast<double>(rank));
    fp.observables.push_back(p);
    fp.centers.push_back(centers[j]);
  }
  return fp;
}

/// sum over eigenvalues within tol of 1 of |R_i>><<L_i|.
inline SuperOperator spectral_fixed_projector(const EigenDecomposition& eig,
                                              double unit_tol = kDefaultTolerances.unit_eigenvalue) {
  const Index n = eig.values.size();
  SuperOperator p = SuperOperator::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    if (std::abs(eig.values(i) - 1.0) <= unit_tol) p += eig.right.col(i) * eig.left.col(i).adjoint();
  }
  return p;
}

struct AsymptoticProjector {
  SuperOperator projector;
  bool rotating_points = false;  // limit absent; projector is then the Cesaro mean
  std::vector<Complex> rotating_eigenvalues;
};

inline std::vector<Complex> rotating_eigenvalues(const Eigen::VectorXcd& spectrum,
                                                 double unit_tol = kDefaultTolerances.unit_eigenvalue) {
  std::vector<Complex> out;
  for (Index i = 0; i < spectrum.size(); ++i) {
    const Complex l = spectrum(i);
    if (std::abs(std::abs(l) - 1.0) <= unit_tol && std::abs(l - 1.0) > unit_tol) out.push_back(l);
  }
  return out;
}

/// Orthogonal projector onto the fixed-point space (the commutant). For a
/// unital channel left and right fixed points coincide, so this equals the
/// spectral projector and the limit of Phi^m when no rotating points exist.
inline AsymptoticProjector asymptotic_projector(const FixedPoints& fp, const Eigen::VectorXcd& spectrum,
                                                double unit_tol = kDefaultTolerances.unit_eigenvalue) {
  AsymptoticProjector out;
  out.projector = fp.commutant_basis * fp.commutant_basis.adjoint();
  out.rotating_eigenvalues = rotating_eigenvalues(spectrum, unit_tol);
  out.rotating_points = !out.rotating_eigenvalues.empty();
  return out;
}

/// Same object from the eigendecomposition alone; usable for maps that do not
/// come from a Kraus pair.
inline AsymptoticProjector asymptotic_projector(const EigenDecomposition& eig,
                                                double unit_tol = kDefaultTolerances.unit_eigenvalue) {
  AsymptoticProjector out;
  out.projector = spectral_fixed_projector(eig, unit_tol);
  out.rotating_eigenvalues = rotating_eigenvalues(eig.values, unit_tol);
  out.rotating_points = !out.rotating_eigenvalues.empty();
  return out;
}

struct MetastableWindow {
  Index q = 0;                 // 1-based index into the sorted spectrum
  double m_lo = 0.0;
  double m_hi = 0.0;           // +inf when |lambda_q| = 1
  bool unbounded = false;
  bool empty = false;          // separation below the heuristic factor

  /// m_hi / max(m_lo, 1): a window cannot open below one repetition.
  double separation() const {
    if (unbounded) return std::numeric_limits<double>::infinity();
    return m_hi / std::max(m_lo, 1.0);
  }
};

inline double decay_time(double modulus) {
  if (modulus <= 0.0) return 0.0;
  return 1.0 / std::abs(std::log(modulus));
}

/// Window 1/|ln|lambda_{q+1}|| << m << 1/|ln|lambda_q|| for sorted spectrum
/// and 1-based q. |lambda_q| = 1 yields an unbounded window.
inline MetastableWindow metastable_window(const Eigen::VectorXcd& spectrum, Index q, double factor = 10.0,
                                          double unit_tol = kDefaultTolerances.unit_eigenvalue) {
  if (q < 1 || q >= spectrum.size()) {
    throw Error(ErrorCode::IndexOutOfRange,
                "q = " + std::to_string(q) + " for spectrum of size " + std::to_string(spectrum.size()));
  }
  const double hi = std::abs(spectrum(q - 1));
  const double lo = std::abs(spectrum(q));
  MetastableWindow w;
  w.q = q;
  w.m_lo = decay_time(lo);
  if (std::abs(hi - 1.0) <= unit_tol) {
    w.unbounded = true;
    w.m_hi = std::numeric_limits<double>::infinity();
  } else {
    w.m_hi = decay_time(hi);
  }
  w.empty = !(w.separation() >= factor);
  return w;
}

enum class Steering { Polarization, Depolarization, MetastablePolarization };

constexpr const char* to_string(Steering s) {
  switch (s) {
    case Steering::Polarization: return "Polarization";
    case Steering::Depolarization: return "Depolarization";
    case Steering::MetastablePolarization: return "MetastablePolarization";
  }
  return "Unknown";
}

struct Classification {
  Steering steering = Steering::Depolarization;
  double commutation = 0.0;
  std::optional<MetastableWindow> window;  // widest finite window scanned
};

/// Best finite window over q in [max(u + 1, d), d^2 - 1], u being the number
/// of unit-modulus eigenvalues.
inline std::optional<MetastableWindow> best_metastable_window(const Eigen::VectorXcd& spectrum, Index dim,
                                                              double factor = 10.0,
                                                              double unit_tol = kDefaultTolerances.unit_eigenvalue) {
  Index unit = 0;
  for (Index i = 0; i < spectrum.size(); ++i) {
    if (std::abs(std::abs(spectrum(i)) - 1.0) <= unit_tol) ++unit;
  }
  std::optional<MetastableWindow> best;
  for (Index q = std::max(unit + 1, dim); q < spectrum.size(); ++q) {
    const MetastableWindow w = metastable_window(spectrum, q, factor, unit_tol);
    if (!best || w.separation() > best->separation()) best = w;
  }
  return best;
}

inline Classification classify_steering(const ModelOperators& ops, const Eigen::VectorXcd& spectrum,
                                        const Tolerances& tol = kDefaultTolerances, double factor = 10.0) {
  Classification c;
  c.commutation = commutation_measure(ops);
  c.window = best_metastable_window(spectrum, ops.dim(), factor, tol.unit_eigenvalue);
  if (c.commutation < tol.commute) {
    c.steering = Steering::Polarization;
  } else if (c.window && !c.window->empty) {
    c.steering = Steering::MetastablePolarization;
  } else {
    c.steering = Steering::Depolarization;
  }
  return c;
}

struct ChannelAnalysis {
  ModelOperators ops;
  KrausPair kraus;
  SuperOperator phi_hat;
  EigenDecomposition eig;
  FixedPoints fixed;
  AsymptoticProjector asymptotic;
  Classification classification;
  std::optional<double> eta;  // absent when H+ or H- vanishes

  const Eigen::VectorXcd& spectrum() const { return eig.values; }
};

inline ChannelAnalysis analyze_channel(const ModelOperators& ops, double t, double phase,
                                       const Tolerances& tol = kDefaultTolerances, double factor = 10.0) {
  ChannelAnalysis a;
  a.ops = ops;
  a.kraus = kraus_from_model(ops, t, phase);
  a.phi_hat = natural_representation(a.kraus);
  a.eig = eig_general(a.phi_hat, tol);
  a.fixed = fixed_points(a.kraus, tol);
  a.asymptotic = asymptotic_projector(a.fixed, a.eig.values, tol.unit_eigenvalue);
  a.classification = classify_steering(ops, a.eig.values, tol, factor);
  try {
    a.eta = noncommutativity_eta(ops);
  } catch (const Error&) {
    a.eta.reset();
  }
  return a;
}

/// Phi^m by repeated squaring.
inline SuperOperator channel_power(const SuperOperator& phi, std::uint64_t m) {
  require_square(phi, "superoperator");
  SuperOperator result = SuperOperator::Identity(phi.rows(), phi.cols());
  SuperOperator base = phi;
  while (m > 0) {
    if (m & 1U) result = result * base;
    m >>= 1U;
    if (m > 0) base = base * base;
  }
  return result;
}

}  // namespace steer

#pragma once

// Closed-form statistics of the outcome frequency f1 = m1 / m.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/LU>

#include "steer/channel.hpp"
#include "steer/error.hpp"
#include "steer/operator_algebra.hpp"
#include "steer/trajectory.hpp"

namespace steer {

struct ExpectationSplit {
  double total = 0.0;       // exact <f1> at this m
  double fixed_part = 0.0;  // <<I| M1 P |rho>>, sum_j c_j <f1_j>*
  double correction = 0.0;  // (1/m) sum_n <<I| M1 Phi^n (I - P) |rho>>
};

/// <f1> = (1/m) sum_{n=0}^{m-1} <<I| M1 Phi^n |rho>>, split into the fixed-point
/// part and the finite-m remainder. Both pieces are evaluated independently.
inline ExpectationSplit analytic_expectation_f1(const Operator& rho0, const SuperOperator& phi,
                                                const SuperOperator& m1_hat, const SuperOperator& p_hat,
                                                std::int64_t m) {
  if (m < 1) throw Error(ErrorCode::InvalidArgument, "m must be at least 1");
  const Eigen::RowVectorXcd obs = trace_functional(m1_hat);
  HSVector v = vec(rho0);
  HSVector w = v - p_hat * v;
  Complex total{}, corr{};
  for (std::int64_t n = 0; n < m; ++n) {
    total += (obs * v).value();
    corr += (obs * w).value();
    v = phi * v;
    w = phi * w;
  }
  ExpectationSplit out;
  out.total = total.real() / static_cast<double>(m);
  out.correction = corr.real() / static_cast<double>(m);
  out.fixed_part = (obs * (p_hat * vec(rho0))).value().real();
  return out;
}

inline ExpectationSplit analytic_expectation_f1(const Operator& rho0, const ChannelAnalysis& a, std::int64_t m) {
  return analytic_expectation_f1(rho0, a.phi_hat, conjugation(a.kraus.m1), a.asymptotic.projector, m);
}

/// <f1_j>* = <<I| M1 |rho_fix^j>> for each fixed point.
inline std::vector<double> fixed_point_peak_centers(const FixedPoints& fp, const KrausPair& k) {
  std::vector<double> c;
  for (const auto& rho : fp.states) c.push_back((k.m1 * rho * k.m1.adjoint()).trace().real());
  return c;
}

/// <sigma_z> = -Re{Tr[U1 rho U0^dagger] e^{i dphi}}.
inline double coherence(const Operator& rho, const ModelOperators& ops, double t, double phase) {
  const EvolutionPair u = conditional_evolutions(ops, t);
  if (rho.rows() != ops.dim()) throw Error(ErrorCode::DimensionMismatch, "state does not match model");
  return -((u.u1 * rho * u.u0.adjoint()).trace() * std::polar(1.0, phase)).real();
}

/// Exact finite-m variance of f1 for trajectories started in fixed point j.
///
/// With D = Phi - P, Q = I - P, R = (I - D)^{-1} and
/// E_n = sum_r (a_r - c)^n M_r (a_0 = 0, a_1 = 1, c the peak center):
///   Var = e2/m + (2/m) <<I|E1 R Q E1|rho>> - (2/m^2) <<I|E1 (I - D^m) R^2 Q E1|rho>>
///         + (1 - 1/m) <<I|E1 P E1|rho>>
/// The last term vanishes whenever the commutant is abelian.
inline double analytic_variance_fixed(std::size_t j, const ChannelAnalysis& a, std::int64_t m,
                                      const Tolerances& tol = kDefaultTolerances) {
  if (j >= a.fixed.count()) throw Error(ErrorCode::IndexOutOfRange, "fixed point " + std::to_string(j));
  if (m < 1) throw Error(ErrorCode::InvalidArgument, "m must be at least 1");
  const Index n = a.phi_hat.rows();
  const SuperOperator m0 = conjugation(a.kraus.m0);
  const SuperOperator m1 = conjugation(a.kraus.m1);
  const HSVector rho = vec(a.fixed.states[j]);
  const double c = (trace_functional(m1) * rho).value().real();

  const SuperOperator e1 = (1.0 - c) * m1 - c * m0;
  const SuperOperator e2 = (1.0 - c) * (1.0 - c) * m1 + c * c * m0;
  const SuperOperator& p = a.asymptotic.projector;
  const SuperOperator id = SuperOperator::Identity(n, n);
  const SuperOperator d = a.phi_hat - p;
  const SuperOperator q = id - p;

  Eigen::FullPivLU<Eigen::MatrixXcd> lu(id - d);
  // solve() quietly returns a particular solution on singular input, so rank counts too
  if (!lu.isInvertible() || !(lu.rcond() >= tol.resolvent_rcond)) {
    throw Error(ErrorCode::SingularResolvent, "rcond(I - Phi_D) = " + std::to_string(lu.rcond()));
  }
  const Eigen::RowVectorXcd left = trace_functional(e1);
  const HSVector right = q * (e1 * rho);
  const HSVector r1 = lu.solve(right);
  const HSVector r2 = lu.solve(r1);
  const HSVector dm = channel_power(d, static_cast<std::uint64_t>(m)) * r2;

  const double md = static_cast<double>(m);
  const double e2v = (trace_functional(e2) * rho).value().real();
  const double g1 = (left * r1).value().real();
  const double g2 = (left * (r2 - dm)).value().real();
  const double g0 = (left * (p * (e1 * rho))).value().real();
  return e2v / md + 2.0 * g1 / md - 2.0 * g2 / (md * md) + (1.0 - 1.0 / md) * g0;
}

/// Large-m limit sigma_j^2 of m Var[f1_j].
inline double asymptotic_variance_coefficient(std::size_t j, const ChannelAnalysis& a,
                                              const Tolerances& tol = kDefaultTolerances) {
  const std::int64_t big = std::int64_t{1} << 40;
  return analytic_variance_fixed(j, a, big, tol) * static_cast<double>(big);
}

struct PeakEntry {
  double weight = 0.0;        // c_j = Tr(P_fix^j rho0)
  double center_f1 = 0.0;     // <f1_j>*
  double center_x = 0.0;      // <f1_j>* - 1/2
  double coherence = 0.0;     // <sigma_z> at rho_fix^j
  double variance = 0.0;      // analytic Var[f1_j] at m
  Index rank = 0;
};

struct PeakReport {
  std::int64_t m = 0;
  std::vector<PeakEntry> peaks;
  double weight_sum = 0.0;
};

inline PeakReport peak_report(const ChannelAnalysis& a, const Operator& rho0, std::int64_t m,
                              const Tolerances& tol = kDefaultTolerances) {
  PeakReport r;
  r.m = m;
  const auto centers = fixed_point_peak_centers(a.fixed, a.kraus);
  for (std::size_t j = 0; j < a.fixed.count(); ++j) {
    PeakEntry e;
    e.weight = (a.fixed.observables[j] * rho0).trace().real();
    e.center_f1 = centers[j];
    e.center_x = centers[j] - 0.5;
    e.coherence = coherence(a.fixed.states[j], a.ops, a.kraus.t, a.kraus.phase);
    e.variance = analytic_variance_fixed(j, a, m, tol);
    e.rank = a.fixed.ranks[j];
    r.weight_sum += e.weight;
    r.peaks.push_back(e);
  }
  return r;
}

/// S(f || F) for Bernoulli parameters, with 0 ln 0 = 0.
inline double binary_relative_entropy(double f, double F) {
  auto term = [](double x, double y) {
    if (x <= 0.0) return 0.0;
    if (y <= 0.0) return std::numeric_limits<double>::infinity();
    return x * std::log(x / y);
  };
  return term(f, F) + term(1.0 - f, 1.0 - F);
}

/// p(m1 = k) for i.i.d. Bernoulli(p1) outcomes.
inline std::vector<double> iid_binomial_baseline(double p1, std::int64_t m) {
  if (!(p1 >= 0.0 && p1 <= 1.0)) throw Error(ErrorCode::InvalidArgument, "p1 outside [0, 1]");
  if (m < 0) throw Error(ErrorCode::InvalidArgument, "m must be non-negative");
  std::vector<double> p(static_cast<std::size_t>(m + 1), 0.0);
  if (p1 == 0.0 || p1 == 1.0) {
    p[p1 == 0.0 ? 0 : static_cast<std::size_t>(m)] = 1.0;
    return p;
  }
  const double lm = std::lgamma(static_cast<double>(m) + 1.0);
  for (std::int64_t k = 0; k <= m; ++k) {
    const double kd = static_cast<double>(k);
    p[static_cast<std::size_t>(k)] = std::exp(lm - std::lgamma(kd + 1.0) - std::lgamma(static_cast<double>(m) - kd + 1.0) +
                                              kd * std::log(p1) + (static_cast<double>(m) - kd) * std::log1p(-p1));
  }
  return p;
}

struct PeakDistribution {
  std::vector<double> grid;         // f1 = k / m
  std::vector<double> probability;  // sums to 1
  std::vector<double> sector_weight;
  std::vector<double> sector_center;
};

/// Commuting case: each sector contributes a relative-entropy kernel
/// e^{-m S(F || F_k)} normalized over the admissible grid, weighted by
/// Tr(P_k rho0).
inline PeakDistribution commuting_peak_distribution(const Operator& rho0, const ModelOperators& ops, double t,
                                                    double phase, std::int64_t m,
                                                    const Tolerances& tol = kDefaultTolerances) {
  if (m < 1) throw Error(ErrorCode::InvalidArgument, "m must be at least 1");
  const double cm = commutation_measure(ops);
  if (!(cm < tol.commute)) {
    throw Error(ErrorCode::NotCommuting, "normalized commutator " + std::to_string(cm));
  }
  const KrausPair k = kraus_from_model(ops, t, phase);
  const FixedPoints fp = fixed_points(k, tol);
  PeakDistribution out;
  const auto nm = static_cast<std::size_t>(m + 1);
  out.grid.resize(nm);
  for (std::size_t i = 0; i < nm; ++i) out.grid[i] = static_cast<double>(i) / static_cast<double>(m);
  out.probability.assign(nm, 0.0);
  // sectors with equal centers share one kernel
  for (std::size_t j = 0; j < fp.count(); ++j) {
    const double w = (fp.projectors[j] * rho0).trace().real();
    bool merged = false;
    for (std::size_t i = 0; i < out.sector_center.size(); ++i) {
      if (std::abs(out.sector_center[i] - fp.centers[j]) < tol.algebraic) {
        out.sector_weight[i] += w;
        merged = true;
        break;
      }
    }
    if (!merged) {
      out.sector_weight.push_back(w);
      out.sector_center.push_back(fp.centers[j]);
    }
  }
  for (std::size_t j = 0; j < out.sector_center.size(); ++j) {
    const double w = out.sector_weight[j];
    const double center = out.sector_center[j];
    std::vector<double> logk(nm);
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < nm; ++i) {
      logk[i] = -static_cast<double>(m) * binary_relative_entropy(out.grid[i], center);
      peak = std::max(peak, logk[i]);
    }
    double norm = 0.0;
    for (auto& l : logk) {
      l = std::exp(l - peak);
      norm += l;
    }
    for (std::size_t i = 0; i < nm; ++i) out.probability[i] += w * logk[i] / norm;
  }
  return out;
}

/// |(1/m) sum_{n<m} <<I| M1 Phi^n (I - P) |rho>>| at each requested m.
inline std::vector<double> asymptotic_tail_vanishing(const SuperOperator& phi, const SuperOperator& m1_hat,
                                                     const SuperOperator& p_hat, const Operator& rho0,
                                                     std::vector<std::int64_t> m_list) {
  std::vector<double> out(m_list.size(), 0.0);
  if (m_list.empty()) return out;
  const std::int64_t m_max = *std::max_element(m_list.begin(), m_list.end());
  if (*std::min_element(m_list.begin(), m_list.end()) < 1) {
    throw Error(ErrorCode::InvalidArgument, "m must be at least 1");
  }
  const Eigen::RowVectorXcd obs = trace_functional(m1_hat);
  HSVector w = vec(rho0);
  w -= p_hat * w;
  std::vector<Complex> partial(static_cast<std::size_t>(m_max) + 1, Complex{});
  Complex acc{};
  for (std::int64_t n = 0; n < m_max; ++n) {
    acc += (obs * w).value();
    partial[static_cast<std::size_t>(n + 1)] = acc;
    w = phi * w;
  }
  for (std::size_t i = 0; i < m_list.size(); ++i) {
    out[i] = std::abs(partial[static_cast<std::size_t>(m_list[i])]) / static_cast<double>(m_list[i]);
  }
  return out;
}

/// Spectral projector variant for maps given only as a superoperator.
inline std::vector<double> asymptotic_tail_vanishing(const SuperOperator& phi, const SuperOperator& m1_hat,
                                                     const Operator& rho0, std::vector<std::int64_t> m_list) {
  const EigenDecomposition eig = eig_general(phi);
  return asymptotic_tail_vanishing(phi, m1_hat, spectral_fixed_projector(eig), rho0, std::move(m_list));
}

}  // namespace steer

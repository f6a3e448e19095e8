#pragma once

// Sequential measurements: conditional-state trajectories, ensembles, and
// exact outcome distributions.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "steer/channel.hpp"
#include "steer/error.hpp"
#include "steer/operator_algebra.hpp"
#include "steer/tolerances.hpp"

namespace steer {

/// Pair of CP maps whose sum is a channel. The trace functionals <<I|E_a are
/// cached because every step needs them.
struct Instrument {
  SuperOperator e0;
  SuperOperator e1;
  Eigen::RowVectorXcd tr0;
  Eigen::RowVectorXcd tr1;

  Index dim() const { return hs_dimension_root(e0.rows()); }
  const SuperOperator& operator[](int alpha) const { return alpha == 0 ? e0 : e1; }
  SuperOperator channel() const { return e0 + e1; }
};

inline Instrument make_instrument(SuperOperator e0, SuperOperator e1) {
  require_square(e0, "instrument map");
  if (e0.rows() != e1.rows() || e1.rows() != e1.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "instrument maps differ in shape");
  }
  Instrument in;
  in.tr0 = trace_functional(e0);
  in.tr1 = trace_functional(e1);
  in.e0 = std::move(e0);
  in.e1 = std::move(e1);
  return in;
}

inline Instrument ideal_instrument(const KrausPair& k) {
  return make_instrument(conjugation(k.m0), conjugation(k.m1));
}

struct InstrumentReport {
  CptpReport sum;
  double choi_min_e0 = 0.0;
  double choi_min_e1 = 0.0;
};

inline InstrumentReport validate_instrument(const Instrument& in, double tp_tol = 1e-10,
                                            double choi_tol = 1e-8) {
  InstrumentReport r;
  r.sum = validate_cptp(in.channel(), tp_tol, choi_tol);
  r.choi_min_e0 = hermitian_eigenvalues(choi_matrix(in.e0))(0);
  r.choi_min_e1 = hermitian_eigenvalues(choi_matrix(in.e1))(0);
  if (r.choi_min_e0 < -choi_tol || r.choi_min_e1 < -choi_tol) {
    throw Error(ErrorCode::NotAChannel, "instrument branch is not completely positive");
  }
  return r;
}

inline double outcome_probability(const Instrument& in, int alpha, const HSVector& rho) {
  return ((alpha == 0 ? in.tr0 : in.tr1) * rho).value().real();
}

struct StepResult {
  int outcome = 0;
  Operator rho;
  double probability = 0.0;
};

/// One measurement: outcome 0 iff u < p0; the conditional state is
/// re-Hermitized and renormalized.
inline StepResult step(const Operator& rho, const Instrument& in, double u,
                       const Tolerances& tol = kDefaultTolerances) {
  const HSVector v = vec(rho);
  if (v.size() != in.e0.cols()) throw Error(ErrorCode::DimensionMismatch, "state does not match instrument");
  const double p0 = (in.tr0 * v).value().real();
  StepResult r;
  r.outcome = u < p0 ? 0 : 1;
  r.probability = r.outcome == 0 ? p0 : (in.tr1 * v).value().real();
  if (!(r.probability >= tol.zero_probability)) {
    throw Error(ErrorCode::ZeroProbabilityBranch,
                "outcome " + std::to_string(r.outcome) + " has probability " + std::to_string(r.probability));
  }
  Operator next = hermitize(devec(in[r.outcome] * v));
  r.rho = next / next.trace().real();
  return r;
}

/// Per-trajectory generator keyed by (master seed, trajectory index), so a
/// trajectory's randomness never depends on scheduling.
class TrajectoryStream {
 public:
  TrajectoryStream(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    engine_.seed(seq);
  }

  /// uniform on [0, 1) with 53 random bits
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

 private:
  std::mt19937_64 engine_;
};

struct TrajectoryRecord {
  std::vector<std::uint8_t> outcomes;
  std::int64_t m1 = 0;
  double f1 = 0.0;
  double x = 0.0;          // f1 - 1/2
  Operator final_state;
  double log_probability = 0.0;

  std::int64_t m() const { return static_cast<std::int64_t>(outcomes.size()); }
};

inline void check_trajectory_state(const Operator& rho, double psd_tol) {
  const double w = hermitian_eigenvalues(rho)(0);
  if (w < -psd_tol) throw Error(ErrorCode::NotPSD, "conditional state eigenvalue " + std::to_string(w));
}

inline TrajectoryRecord run_trajectory(const Operator& rho0, const Instrument& in, std::int64_t m,
                                       TrajectoryStream& stream, const Tolerances& tol = kDefaultTolerances,
                                       bool check_each_step = false) {
  if (m < 1) throw Error(ErrorCode::InvalidArgument, "m must be at least 1");
  TrajectoryRecord rec;
  rec.outcomes.reserve(static_cast<std::size_t>(m));
  Operator rho = rho0;
  for (std::int64_t n = 0; n < m; ++n) {
    StepResult s = step(rho, in, stream.uniform(), tol);
    rec.outcomes.push_back(static_cast<std::uint8_t>(s.outcome));
    rec.m1 += s.outcome;
    rec.log_probability += std::log(s.probability);
    rho = std::move(s.rho);
    if (check_each_step) check_trajectory_state(rho, tol.trajectory_psd);
  }
  check_trajectory_state(rho, tol.trajectory_psd);
  rec.final_state = std::move(rho);
  rec.f1 = static_cast<double>(rec.m1) / static_cast<double>(m);
  rec.x = rec.f1 - 0.5;
  return rec;
}

/// <<I| E_{a_m} ... E_{a_1} |rho>> for a given outcome sequence.
inline double sequence_probability(const Operator& rho0, const Instrument& in,
                                   const std::vector<std::uint8_t>& outcomes) {
  HSVector v = vec(rho0);
  for (auto a : outcomes) v = in[a] * v;
  return vec(identity(in.dim())).dot(v).real();
}

/// Streaming mean and variance with an order-fixed pairwise merge.
struct Welford {
  std::int64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++n;
    const double delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (x - mean);
  }

  void merge(const Welford& o) {
    if (o.n == 0) return;
    if (n == 0) {
      *this = o;
      return;
    }
    const double total = static_cast<double>(n + o.n);
    const double delta = o.mean - mean;
    mean += delta * static_cast<double>(o.n) / total;
    m2 += o.m2 + delta * delta * static_cast<double>(n) * static_cast<double>(o.n) / total;
    n += o.n;
  }

  double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
  double population_variance() const { return n > 0 ? m2 / static_cast<double>(n) : 0.0; }
  double stderr_mean() const { return n > 1 ? std::sqrt(variance() / static_cast<double>(n)) : 0.0; }
};

/// Entrywise Welford over operators (real and imaginary parts separately).
struct OperatorWelford {
  std::int64_t n = 0;
  Operator mean;
  Eigen::MatrixXd m2_re;
  Eigen::MatrixXd m2_im;

  void add(const Operator& x) {
    if (n == 0) {
      mean = Operator::Zero(x.rows(), x.cols());
      m2_re = Eigen::MatrixXd::Zero(x.rows(), x.cols());
      m2_im = Eigen::MatrixXd::Zero(x.rows(), x.cols());
    }
    ++n;
    const Operator delta = x - mean;
    mean += delta / static_cast<double>(n);
    const Operator after = x - mean;
    m2_re += delta.real().cwiseProduct(after.real());
    m2_im += delta.imag().cwiseProduct(after.imag());
  }

  void merge(const OperatorWelford& o) {
    if (o.n == 0) return;
    if (n == 0) {
      *this = o;
      return;
    }
    const double na = static_cast<double>(n), nb = static_cast<double>(o.n), total = na + nb;
    const Operator delta = o.mean - mean;
    mean += delta * (nb / total);
    m2_re += o.m2_re + delta.real().cwiseAbs2() * (na * nb / total);
    m2_im += o.m2_im + delta.imag().cwiseAbs2() * (na * nb / total);
    n += o.n;
  }

  /// standard error of the mean, entrywise, combined as sqrt(se_re^2 + se_im^2)
  Eigen::MatrixXd stderr_mean() const {
    if (n < 2) return Eigen::MatrixXd::Zero(mean.rows(), mean.cols());
    const double k = 1.0 / (static_cast<double>(n - 1) * static_cast<double>(n));
    return ((m2_re + m2_im) * k).cwiseSqrt();
  }
};

struct ClassStats {
  std::int64_t count = 0;
  std::vector<Welford> fidelity;  // one per target state
  OperatorWelford state;
};

struct Snapshot {
  std::int64_t m = 0;
  std::vector<std::int64_t> histogram;   // over X in [-1/2, 1/2], uniform bins
  std::vector<std::int64_t> m1_counts;   // exact counts of m1 = 0..m
  std::vector<ClassStats> classes;
  Welford f1;
  OperatorWelford state;                 // unconditional mean state
};

struct EnsembleOptions {
  std::vector<std::int64_t> m_list{1, 10, 100, 1000};
  std::int64_t samples = 20000;
  std::uint64_t seed = 1;
  int hist_bins = 101;
  std::vector<double> class_edges{0.0};   // interior edges; class c is [edge_{c-1}, edge_c)
  std::vector<Operator> targets;          // fidelity references
  int threads = 1;
  int block_size = 64;
  bool keep_records = false;
  bool check_each_step = false;
  Tolerances tol = kDefaultTolerances;
};

struct TrajectoryEnsemble {
  EnsembleOptions options;
  std::vector<Snapshot> snapshots;            // aligned with sorted unique m_list
  std::vector<TrajectoryRecord> records;      // only with keep_records (longest m)

  const Snapshot& at(std::int64_t m) const {
    for (const auto& s : snapshots) {
      if (s.m == m) return s;
    }
    throw Error(ErrorCode::IndexOutOfRange, "no snapshot at m = " + std::to_string(m));
  }

  std::size_t class_count() const { return options.class_edges.size() + 1; }
};

inline int histogram_bin(double x, int bins) {
  const int b = static_cast<int>(std::floor((x + 0.5) * bins));
  return std::clamp(b, 0, bins - 1);
}

inline int class_index(double x, const std::vector<double>& edges) {
  return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), x) - edges.begin());
}

/// Three edges {-0.2, 0, 0.2} for a spin pair, a single split at 0 otherwise.
inline std::vector<double> default_class_edges(int n_spins) {
  if (n_spins == 2) return {-0.2, 0.0, 0.2};
  return {0.0};
}

namespace detail {

inline Snapshot empty_snapshot(std::int64_t m, const EnsembleOptions& opt) {
  Snapshot s;
  s.m = m;
  s.histogram.assign(static_cast<std::size_t>(opt.hist_bins), 0);
  s.m1_counts.assign(static_cast<std::size_t>(m + 1), 0);
  s.classes.resize(opt.class_edges.size() + 1);
  for (auto& c : s.classes) c.fidelity.resize(opt.targets.size());
  return s;
}

inline void merge_snapshot(Snapshot& into, const Snapshot& from) {
  for (std::size_t i = 0; i < into.histogram.size(); ++i) into.histogram[i] += from.histogram[i];
  for (std::size_t i = 0; i < into.m1_counts.size(); ++i) into.m1_counts[i] += from.m1_counts[i];
  for (std::size_t c = 0; c < into.classes.size(); ++c) {
    into.classes[c].count += from.classes[c].count;
    for (std::size_t t = 0; t < into.classes[c].fidelity.size(); ++t) {
      into.classes[c].fidelity[t].merge(from.classes[c].fidelity[t]);
    }
    into.classes[c].state.merge(from.classes[c].state);
  }
  into.f1.merge(from.f1);
  into.state.merge(from.state);
}

struct Block {
  std::vector<Snapshot> snapshots;
  std::vector<TrajectoryRecord> records;
};

inline Block run_block(const Operator& rho0, const Instrument& in, const EnsembleOptions& opt,
                       const std::vector<std::int64_t>& ms, const std::vector<Operator>& target_roots,
                       std::int64_t first, std::int64_t last) {
  Block b;
  for (auto m : ms) b.snapshots.push_back(empty_snapshot(m, opt));
  const std::int64_t m_max = ms.back();
  for (std::int64_t idx = first; idx < last; ++idx) {
    TrajectoryStream stream(opt.seed, static_cast<std::uint64_t>(idx));
    Operator rho = rho0;
    std::int64_t m1 = 0;
    std::size_t next = 0;
    TrajectoryRecord rec;
    try {
      for (std::int64_t n = 1; n <= m_max; ++n) {
        StepResult s = step(rho, in, stream.uniform(), opt.tol);
        m1 += s.outcome;
        rho = std::move(s.rho);
        if (opt.keep_records) {
          rec.outcomes.push_back(static_cast<std::uint8_t>(s.outcome));
          rec.log_probability += std::log(s.probability);
        }
        if (opt.check_each_step) check_trajectory_state(rho, opt.tol.trajectory_psd);
        if (n != ms[next]) continue;
        check_trajectory_state(rho, opt.tol.trajectory_psd);
        Snapshot& snap = b.snapshots[next];
        const double f1 = static_cast<double>(m1) / static_cast<double>(n);
        const double x = f1 - 0.5;
        ++snap.histogram[static_cast<std::size_t>(histogram_bin(x, opt.hist_bins))];
        ++snap.m1_counts[static_cast<std::size_t>(m1)];
        snap.f1.add(f1);
        snap.state.add(rho);
        ClassStats& cls = snap.classes[static_cast<std::size_t>(class_index(x, opt.class_edges))];
        ++cls.count;
        cls.state.add(rho);
        for (std::size_t t = 0; t < target_roots.size(); ++t) {
          cls.fidelity[t].add(fidelity_with_root(target_roots[t], rho));
        }
        ++next;
      }
    } catch (const Error& e) {
      throw Error(e.code(), "trajectory " + std::to_string(idx) + ": " + e.what());
    }
    if (opt.keep_records) {
      rec.m1 = m1;
      rec.f1 = static_cast<double>(m1) / static_cast<double>(m_max);
      rec.x = rec.f1 - 0.5;
      rec.final_state = rho;
      b.records.push_back(std::move(rec));
    }
  }
  return b;
}

}  // namespace detail

/// Monte Carlo ensemble. Trajectories are grouped in fixed blocks by index and
/// blocks are reduced in index order, so results are identical for any
/// thread count.
inline TrajectoryEnsemble run_ensemble(const Operator& rho0, const Instrument& in, EnsembleOptions opt) {
  if (opt.samples < 1) throw Error(ErrorCode::InvalidArgument, "samples must be at least 1");
  if (opt.hist_bins < 1) throw Error(ErrorCode::InvalidArgument, "hist_bins must be at least 1");
  if (opt.block_size < 1) throw Error(ErrorCode::InvalidArgument, "block_size must be at least 1");
  if (opt.m_list.empty()) throw Error(ErrorCode::InvalidArgument, "m_list is empty");
  if (rho0.rows() != in.dim()) throw Error(ErrorCode::DimensionMismatch, "initial state does not match instrument");
  if (!is_density(rho0, 1e-10, 1e-9, 1e-9)) throw Error(ErrorCode::NotPSD, "initial state is not a density matrix");
  std::sort(opt.class_edges.begin(), opt.class_edges.end());
  std::vector<std::int64_t> ms = opt.m_list;
  std::sort(ms.begin(), ms.end());
  ms.erase(std::unique(ms.begin(), ms.end()), ms.end());
  if (ms.front() < 1) throw Error(ErrorCode::InvalidArgument, "m must be at least 1");
  opt.m_list = ms;
  for (const auto& t : opt.targets) {
    if (t.rows() != in.dim()) throw Error(ErrorCode::DimensionMismatch, "target state does not match instrument");
  }
  std::vector<Operator> roots;
  for (const auto& t : opt.targets) roots.push_back(psd_sqrt(t, opt.tol.psd));

  const std::int64_t n_blocks = (opt.samples + opt.block_size - 1) / opt.block_size;
  std::vector<detail::Block> blocks(static_cast<std::size_t>(n_blocks));
  std::vector<std::exception_ptr> failures(static_cast<std::size_t>(n_blocks));
  std::atomic<std::int64_t> cursor{0};
  auto worker = [&] {
    for (;;) {
      const std::int64_t b = cursor.fetch_add(1);
      if (b >= n_blocks) return;
      const std::int64_t first = b * opt.block_size;
      const std::int64_t last = std::min(opt.samples, first + opt.block_size);
      try {
        blocks[static_cast<std::size_t>(b)] = detail::run_block(rho0, in, opt, ms, roots, first, last);
      } catch (...) {
        failures[static_cast<std::size_t>(b)] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(opt.threads, static_cast<int>(n_blocks)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  TrajectoryEnsemble out;
  out.options = opt;
  for (auto m : ms) out.snapshots.push_back(detail::empty_snapshot(m, opt));
  for (auto& b : blocks) {
    for (std::size_t s = 0; s < ms.size(); ++s) detail::merge_snapshot(out.snapshots[s], b.snapshots[s]);
    for (auto& r : b.records) out.records.push_back(std::move(r));
  }
  return out;
}

/// Phi^m |rho0>>, the unconditional state after m cycles.
inline Operator channel_power_state(const Operator& rho0, const SuperOperator& phi, std::uint64_t m) {
  return devec(channel_power(phi, m) * vec(rho0));
}

inline constexpr int kBruteForceCap = 16;

struct SequenceDistribution {
  std::int64_t m = 0;
  std::vector<double> sequence_probability;  // index bit n-1 holds outcome n
  std::vector<double> frequency;             // p(m1 = k), k = 0..m
};

/// Exhaustive enumeration of all 2^m outcome sequences.
inline SequenceDistribution brute_force_distribution(const Operator& rho0, const Instrument& in, int m,
                                                     int cap = kBruteForceCap) {
  if (m < 0) throw Error(ErrorCode::InvalidArgument, "m must be non-negative");
  if (m > cap) throw Error(ErrorCode::TooLarge, "2^" + std::to_string(m) + " sequences exceed the cap");
  SequenceDistribution out;
  out.m = m;
  out.sequence_probability.assign(std::size_t{1} << m, 0.0);
  out.frequency.assign(static_cast<std::size_t>(m + 1), 0.0);
  const HSVector id = vec(identity(in.dim()));

  std::vector<HSVector> stack(static_cast<std::size_t>(m + 1));
  stack[0] = vec(rho0);
  // depth-first over prefixes; level n holds the unnormalized state after n outcomes
  auto recurse = [&](auto&& self, int level, std::uint64_t index, int ones) -> void {
    if (level == m) {
      const double p = id.dot(stack[static_cast<std::size_t>(level)]).real();
      out.sequence_probability[index] = p;
      out.frequency[static_cast<std::size_t>(ones)] += p;
      return;
    }
    for (int a = 0; a < 2; ++a) {
      stack[static_cast<std::size_t>(level + 1)] = in[a] * stack[static_cast<std::size_t>(level)];
      self(self, level + 1, index | (static_cast<std::uint64_t>(a) << level), ones + a);
    }
  };
  recurse(recurse, 0, 0, 0);
  return out;
}

/// p(m1 = k) by dynamic programming over counts; exact for any m.
inline std::vector<double> exact_frequency_distribution(const Operator& rho0, const Instrument& in, std::int64_t m) {
  if (m < 0) throw Error(ErrorCode::InvalidArgument, "m must be non-negative");
  std::vector<HSVector> v(static_cast<std::size_t>(m + 1), HSVector::Zero(in.e0.rows()));
  v[0] = vec(rho0);
  for (std::int64_t n = 1; n <= m; ++n) {
    for (std::int64_t k = n; k >= 0; --k) {
      HSVector next = in.e0 * v[static_cast<std::size_t>(k)];
      if (k > 0) next += in.e1 * v[static_cast<std::size_t>(k - 1)];
      v[static_cast<std::size_t>(k)] = std::move(next);
    }
  }
  const HSVector id = vec(identity(in.dim()));
  std::vector<double> p(static_cast<std::size_t>(m + 1));
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = id.dot(v[k]).real();
  return p;
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw Error(ErrorCode::DimensionMismatch, "distributions differ in support");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

inline std::vector<double> empirical_frequency(const Snapshot& s) {
  std::int64_t total = 0;
  for (auto c : s.m1_counts) total += c;
  std::vector<double> p(s.m1_counts.size(), 0.0);
  if (total == 0) return p;
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = static_cast<double>(s.m1_counts[k]) / static_cast<double>(total);
  return p;
}

}  // namespace steer

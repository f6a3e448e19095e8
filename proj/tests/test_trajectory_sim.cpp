#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "steer/trajectory.hpp"

using namespace steer;

namespace {

ModelOperators illustrative(double gamma) { return {spin::sz(), gamma * spin::sx()}; }

Instrument instrument_for(const ModelOperators& o, double t, double phi = kPi / 2) {
  return ideal_instrument(kraus_from_model(o, t, phi));
}

}  // namespace

TEST(Instrument, IdealIsValid) {
  std::mt19937_64 rng(1);
  const Instrument in = instrument_for({oracle::random_hermitian(4, rng), oracle::random_hermitian(4, rng)}, 0.8, 0.4);
  const InstrumentReport r = validate_instrument(in);
  EXPECT_TRUE(r.sum.is_channel());
}

TEST(Step, ZeroTimeHalfHalf) {
  const Instrument in = instrument_for(illustrative(0.3), 0.0);
  std::mt19937_64 rng(2);
  const Operator rho = oracle::random_density(2, rng);
  const StepResult a = step(rho, in, 0.3);
  EXPECT_EQ(a.outcome, 0);
  EXPECT_NEAR(a.probability, 0.5, 1e-15);
  EXPECT_LT((a.rho - rho).norm(), 1e-14);
  const StepResult b = step(rho, in, 0.7);
  EXPECT_EQ(b.outcome, 1);
  EXPECT_LT((b.rho - rho).norm(), 1e-14);
}

TEST(Step, CommutingFixedPointIsStationary) {
  Operator b = Operator::Zero(2, 2);
  b.diagonal() << 0.7, -0.7;
  const double t = 1.1;
  const Instrument in = instrument_for({b, Operator::Zero(2, 2)}, t);
  for (Index k = 0; k < 2; ++k) {
    const Operator rho = basis_projector(2, k);
    const double expected_p1 = 0.5 * (1.0 + std::cos(2.0 * b(k, k).real() * t + kPi / 2));
    for (double u : {0.01, 0.99}) {
      const StepResult s = step(rho, in, u);
      EXPECT_NEAR(s.probability, s.outcome ? expected_p1 : 1.0 - expected_p1, 1e-13);
      EXPECT_LT((s.rho - rho).norm(), 1e-12);
    }
  }
}

TEST(Step, ProbabilitiesSumToOne) {
  std::mt19937_64 rng(3);
  for (int r = 0; r < 5; ++r) {
    const Instrument in = instrument_for({oracle::random_hermitian(2, rng), oracle::random_hermitian(2, rng)}, 0.6, 0.9);
    const HSVector v = vec(oracle::random_density(2, rng));
    EXPECT_NEAR(outcome_probability(in, 0, v) + outcome_probability(in, 1, v), 1.0, 1e-13);
  }
}

TEST(Step, ZeroProbabilityBranch) {
  // t = 0, dphi = 0: M1 = I, M0 = 0; forcing outcome 0 is impossible
  const Instrument in = instrument_for(illustrative(0.1), 0.0, 0.0);
  try {
    step(maximally_mixed(2), in, -0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroProbabilityBranch);
  }
}

TEST(Trajectory, LogProbabilityMatchesSuperoperatorProduct) {
  std::mt19937_64 rng(4);
  const Instrument in = instrument_for({oracle::random_hermitian(4, rng), oracle::random_hermitian(4, rng)}, 0.5, 1.2);
  const Operator rho0 = oracle::random_density(4, rng);
  for (std::uint64_t idx = 0; idx < 5; ++idx) {
    TrajectoryStream s(9, idx);
    const TrajectoryRecord rec = run_trajectory(rho0, in, 25, s, kDefaultTolerances, true);
    EXPECT_EQ(rec.m(), 25);
    const double p = sequence_probability(rho0, in, rec.outcomes);
    EXPECT_NEAR(std::exp(rec.log_probability), p, 1e-9 * std::max(p, 1e-300) + 1e-300);
    EXPECT_NEAR(rec.f1 + (1.0 - rec.f1), 1.0, 0.0);
    EXPECT_NEAR(rec.x, rec.f1 - 0.5, 1e-15);
    EXPECT_TRUE(is_density(rec.final_state, 1e-9, 1e-9, 1e-9));
  }
}

TEST(Trajectory, SingleStepBernoulliMean) {
  const Instrument in = instrument_for(illustrative(0.2), 0.4, 0.3);
  const Operator rho0 = basis_projector(2, 0);
  const double p1 = outcome_probability(in, 1, vec(rho0));
  EnsembleOptions opt;
  opt.m_list = {1};
  opt.samples = 20000;
  opt.seed = 5;
  const TrajectoryEnsemble e = run_ensemble(rho0, in, opt);
  const Snapshot& s = e.at(1);
  const double mean = s.f1.mean;
  EXPECT_NEAR(mean, p1, 4.0 * std::sqrt(p1 * (1 - p1) / 20000));
  EXPECT_EQ(s.m1_counts[0] + s.m1_counts[1], 20000);
}

TEST(Trajectory, FixedPointOutcomesAreIid) {
  // commuting model started in an eigenstate of B: runs test on the outcome stream
  Operator b = Operator::Zero(2, 2);
  b.diagonal() << 0.5, -0.5;
  const Instrument in = instrument_for({b, Operator::Zero(2, 2)}, 1.0);
  TrajectoryStream s(6, 0);
  const TrajectoryRecord rec = run_trajectory(basis_projector(2, 0), in, 20000, s);
  const double n = 20000, n1 = static_cast<double>(rec.m1), n0 = n - n1;
  double runs = 1;
  for (std::size_t i = 1; i < rec.outcomes.size(); ++i) runs += rec.outcomes[i] != rec.outcomes[i - 1] ? 1 : 0;
  const double mu = 2 * n0 * n1 / n + 1;
  const double var = (mu - 1) * (mu - 2) / (n - 1);
  EXPECT_LT(std::abs(runs - mu) / std::sqrt(var), 4.0);
  const double p1 = 0.5 * (1 + std::cos(2 * 0.5 + kPi / 2));
  EXPECT_NEAR(n1 / n, p1, 4 * std::sqrt(p1 * (1 - p1) / n));
}

TEST(Ensemble, PolarizationTwoPeaks) {
  const Instrument in = instrument_for(illustrative(0.0), 0.3);
  EnsembleOptions opt;
  opt.m_list = {1000};
  opt.samples = 4000;
  opt.seed = 7;
  opt.targets = {basis_projector(2, 0), basis_projector(2, 1)};
  const TrajectoryEnsemble e = run_ensemble(maximally_mixed(2), in, opt);
  const Snapshot& s = e.at(1000);
  ASSERT_EQ(s.classes.size(), 2u);
  for (int c = 0; c < 2; ++c) {
    EXPECT_NEAR(static_cast<double>(s.classes[c].count) / 4000, 0.5, 0.04);
  }
  // outcome 1 is likelier for sigma_z = +1 with dphi = pi/2: p1 = (1 + cos(0.6 + pi/2))/2 < 1/2
  // so X < 0 pairs with |up>
  EXPECT_GT(s.classes[0].fidelity[0].mean, 0.99);
  EXPECT_GT(s.classes[1].fidelity[1].mean, 0.99);
  std::int64_t mass = 0;
  for (auto h : s.histogram) mass += h;
  EXPECT_EQ(mass, 4000);
}

TEST(Ensemble, DepolarizationSinglePeak) {
  const Instrument in = instrument_for(illustrative(0.1), 0.3);
  EnsembleOptions opt;
  opt.m_list = {1000};
  opt.samples = 2000;
  opt.seed = 8;
  const TrajectoryEnsemble e = run_ensemble(basis_projector(2, 0), in, opt);
  const Snapshot& s = e.at(1000);
  EXPECT_LT(trace_distance(s.state.mean, maximally_mixed(2)), 0.05);
  // single peak at X = 0; slow mixing keeps it broad (std ~ 0.09 here)
  const int bins = opt.hist_bins;
  std::int64_t central = 0;
  int mode = 0;
  for (int b = 0; b < bins; ++b) {
    const double x = -0.5 + (b + 0.5) / bins;
    if (std::abs(x) < 0.1) central += s.histogram[static_cast<std::size_t>(b)];
    if (s.histogram[static_cast<std::size_t>(b)] > s.histogram[static_cast<std::size_t>(mode)]) mode = b;
  }
  EXPECT_GT(central, 1400);
  EXPECT_LT(std::abs(-0.5 + (mode + 0.5) / bins), 0.05);
}

TEST(Ensemble, MeanStateMatchesChannelPower) {
  std::mt19937_64 rng(9);
  const ModelOperators o{oracle::random_hermitian(2, rng), oracle::random_hermitian(2, rng)};
  const KrausPair k = kraus_from_model(o, 0.7, 0.5);
  const Instrument in = ideal_instrument(k);
  const Operator rho0 = oracle::random_density(2, rng);
  EnsembleOptions opt;
  opt.m_list = {5};
  opt.samples = 20000;
  opt.seed = 10;
  const TrajectoryEnsemble e = run_ensemble(rho0, in, opt);
  const Snapshot& s = e.at(5);
  const Operator expected = channel_power_state(rho0, natural_representation(k), 5);
  const Eigen::MatrixXd se = s.state.stderr_mean();
  for (Index i = 0; i < 2; ++i) {
    for (Index j = 0; j < 2; ++j) {
      EXPECT_LT(std::abs(s.state.mean(i, j) - expected(i, j)), 4 * se(i, j) + 1e-12);
    }
  }
}

TEST(Ensemble, ThreadCountInvariant) {
  const Instrument in = instrument_for(illustrative(0.025), 0.3);
  EnsembleOptions opt;
  opt.m_list = {3, 40};
  opt.samples = 700;
  opt.seed = 11;
  opt.targets = {basis_projector(2, 0)};
  opt.keep_records = true;
  opt.threads = 1;
  const TrajectoryEnsemble a = run_ensemble(maximally_mixed(2), in, opt);
  opt.threads = 4;
  const TrajectoryEnsemble b = run_ensemble(maximally_mixed(2), in, opt);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i].outcomes, b.records[i].outcomes);
  for (std::size_t k = 0; k < a.snapshots.size(); ++k) {
    EXPECT_EQ(a.snapshots[k].histogram, b.snapshots[k].histogram);
    EXPECT_EQ(a.snapshots[k].f1.mean, b.snapshots[k].f1.mean);
    EXPECT_EQ(a.snapshots[k].f1.m2, b.snapshots[k].f1.m2);
    EXPECT_EQ(a.snapshots[k].classes[0].fidelity[0].mean, b.snapshots[k].classes[0].fidelity[0].mean);
  }
}

TEST(ChannelPower, Basics) {
  const KrausPair k = kraus_from_model(illustrative(0.1), 0.3, kPi / 2);
  const SuperOperator phi = natural_representation(k);
  const Operator rho0 = basis_projector(2, 0);
  EXPECT_LT((channel_power_state(rho0, phi, 0) - rho0).norm(), 1e-15);
  for (std::uint64_t m : {1u, 7u, 100u}) EXPECT_NEAR(channel_power_state(rho0, phi, m).trace().real(), 1.0, 1e-12);
  EXPECT_LT((channel_power_state(rho0, phi, 1u << 16) - maximally_mixed(2)).norm(), 1e-8);
}

TEST(BruteForce, SmallCases) {
  const Instrument in = instrument_for(illustrative(0.2), 0.5, 0.4);
  const Operator rho0 = basis_projector(2, 1);
  const SequenceDistribution one = brute_force_distribution(rho0, in, 1);
  EXPECT_NEAR(one.sequence_probability[1], outcome_probability(in, 1, vec(rho0)), 1e-14);
  EXPECT_NEAR(one.sequence_probability[0], outcome_probability(in, 0, vec(rho0)), 1e-14);

  const Instrument flat = instrument_for(illustrative(0.2), 0.0);
  const SequenceDistribution two = brute_force_distribution(rho0, flat, 2);
  for (double p : two.sequence_probability) EXPECT_NEAR(p, 0.25, 1e-15);

  const SequenceDistribution ten = brute_force_distribution(rho0, in, 10);
  double total = 0.0;
  for (double p : ten.sequence_probability) total += p;
  EXPECT_NEAR(total, 1.0, 1e-10);
  const std::vector<double> dp = exact_frequency_distribution(rho0, in, 10);
  for (std::size_t k = 0; k <= 10; ++k) EXPECT_NEAR(dp[k], ten.frequency[k], 1e-12);

  try {
    brute_force_distribution(rho0, in, 17);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooLarge);
  }
}

TEST(BruteForce, MonteCarloAgreement) {
  const Instrument in = instrument_for(illustrative(0.025), 0.3);
  const Operator rho0 = maximally_mixed(2);
  const int m = 10;
  const SequenceDistribution exact = brute_force_distribution(rho0, in, m);
  EnsembleOptions opt;
  opt.m_list = {m};
  opt.samples = 20000;
  opt.seed = 12;
  const TrajectoryEnsemble e = run_ensemble(rho0, in, opt);
  const std::vector<double> emp = empirical_frequency(e.at(m));
  EXPECT_LT(total_variation(exact.frequency, emp), 5.0 / std::sqrt(20000.0));
  for (int k = 0; k <= m; ++k) {
    const double p = exact.frequency[static_cast<std::size_t>(k)];
    EXPECT_NEAR(emp[static_cast<std::size_t>(k)], p, 4 * std::sqrt(p * (1 - p) / 20000) + 1e-4);
  }
}

TEST(Binning, Helpers) {
  EXPECT_EQ(histogram_bin(-0.5, 101), 0);
  EXPECT_EQ(histogram_bin(0.5, 101), 100);
  EXPECT_EQ(histogram_bin(0.0, 101), 50);
  EXPECT_EQ(class_index(-0.1, {0.0}), 0);
  EXPECT_EQ(class_index(0.0, {0.0}), 1);
  EXPECT_EQ(class_index(0.3, {-0.2, 0.0, 0.2}), 3);
  EXPECT_EQ(default_class_edges(2).size(), 3u);
  EXPECT_EQ(default_class_edges(1).size(), 1u);
}

TEST(Welford, MergeMatchesSequential) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> g(2.0, 3.0);
  Welford all, a, b;
  for (int i = 0; i < 1000; ++i) {
    const double x = g(rng);
    all.add(x);
    (i < 377 ? a : b).add(x);
  }
  a.merge(b);
  EXPECT_NEAR(a.mean, all.mean, 1e-12);
  EXPECT_NEAR(a.variance(), all.variance(), 1e-10);
}

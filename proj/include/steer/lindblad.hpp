#pragma once

// Noisy bath: Lindblad evolution of qubit (x) bath during the free-evolution
// window, reduced to a two-outcome instrument on the bath.

#include <cmath>
#include <string>
#include <vector>

#include "steer/channel.hpp"
#include "steer/error.hpp"
#include "steer/model.hpp"
#include "steer/operator_algebra.hpp"
#include "steer/trajectory.hpp"

namespace steer {

struct Dissipator {
  Operator op;
  double rate = 0.0;  // 1/s
};

/// L = -i(H (x) I - I (x) H^T) + sum_k G_k [L (x) L^* - (L^dag L (x) I + I (x) (L^dag L)^T) / 2].
inline SuperOperator liouvillian(const Operator& h, const std::vector<Dissipator>& dissipators) {
  require_square(h, "Hamiltonian");
  if (!is_hermitian(h)) throw Error(ErrorCode::NonHermitianInput, "Hamiltonian is not Hermitian");
  const Index d = h.rows();
  const Operator id = identity(d);
  SuperOperator l = Complex(0.0, -1.0) * (sandwich(h, id) - sandwich(id, h));
  for (const auto& k : dissipators) {
    if (!std::isfinite(k.rate) || k.rate < 0.0) {
      throw Error(ErrorCode::NegativeRate, "rate " + std::to_string(k.rate));
    }
    if (k.op.rows() != d || k.op.cols() != d) throw Error(ErrorCode::DimensionMismatch, "jump operator size");
    if (k.rate == 0.0) continue;
    const Operator ll = k.op.adjoint() * k.op;
    l += k.rate * (conjugation(k.op) - 0.5 * (sandwich(ll, id) + sandwich(id, ll)));
  }
  return l;
}

struct SpinNoise {
  double dephasing = 0.0;  // rate of L = n.sigma
  double down = 0.0;       // rate of sigma^- along the local axis
  double up = 0.0;         // rate of sigma^+
  Vec3 axis = Vec3::UnitZ();
};

struct NoiseSpec {
  std::vector<SpinNoise> spins;  // one per bath spin; missing spins are noiseless

  bool silent() const {
    for (const auto& s : spins) {
      if (s.dephasing != 0.0 || s.down != 0.0 || s.up != 0.0) return false;
    }
    return true;
  }
};

enum class NoiseBasis { Hyperfine, Field };

/// Local quantization axes: the hyperfine direction of each spin (z when it
/// vanishes), or the field axis z for every spin.
inline void assign_noise_axes(NoiseSpec& noise, const ModelSpec& spec, NoiseBasis basis) {
  for (std::size_t k = 0; k < noise.spins.size() && k < spec.bath.size(); ++k) {
    const Vec3 a = spec.bath[k].hyperfine;
    noise.spins[k].axis = (basis == NoiseBasis::Hyperfine && a.norm() > 0.0) ? Vec3(a / a.norm()) : Vec3::UnitZ();
  }
}

struct LocalJumps {
  Operator dephasing;  // |+n><+n| - |-n><-n|
  Operator down;       // |-n><+n|
  Operator up;         // |+n><-n|
};

inline LocalJumps local_jumps(const Vec3& axis) {
  const double n = axis.norm();
  if (!(n > 0.0)) throw Error(ErrorCode::ZeroOperator, "noise axis is zero");
  const Vec3 u = axis / n;
  const Operator ns = u(0) * spin::sx() + u(1) * spin::sy() + u(2) * spin::sz();
  Eigen::SelfAdjointEigenSolver<Operator> es(ns);
  const Eigen::VectorXcd minus = es.eigenvectors().col(0);  // eigenvalue -1
  const Eigen::VectorXcd plus = es.eigenvectors().col(1);   // eigenvalue +1
  return {plus * plus.adjoint() - minus * minus.adjoint(), minus * plus.adjoint(), plus * minus.adjoint()};
}

/// Jump operators on the bath register (dimension 2^K).
inline std::vector<Dissipator> bath_dissipators(const NoiseSpec& noise, int n_spins) {
  if (static_cast<int>(noise.spins.size()) > n_spins) {
    throw Error(ErrorCode::DimensionMismatch, "noise specified for more spins than the bath holds");
  }
  std::vector<Dissipator> out;
  for (int k = 0; k < static_cast<int>(noise.spins.size()); ++k) {
    const SpinNoise& s = noise.spins[static_cast<std::size_t>(k)];
    for (double r : {s.dephasing, s.down, s.up}) {
      if (!std::isfinite(r) || r < 0.0) throw Error(ErrorCode::NegativeRate, "rate " + std::to_string(r));
    }
    const LocalJumps j = local_jumps(s.axis);
    if (s.dephasing > 0.0) out.push_back({spin::embed(j.dephasing, k, n_spins), s.dephasing});
    if (s.down > 0.0) out.push_back({spin::embed(j.down, k, n_spins), s.down});
    if (s.up > 0.0) out.push_back({spin::embed(j.up, k, n_spins), s.up});
  }
  return out;
}

inline constexpr Index kCompositeCap = 256;  // size of the composite Liouvillian

/// Bath instrument of one noisy cycle: E_a = (K_a (x) K_a^*) e^{L t} (J (x) J^*)
/// with J = |psi> (x) I preparing the qubit and K_a = <a| R (x) I reading it out.
inline Instrument noisy_rim_instrument(const ModelOperators& ops, const NoiseSpec& noise, double t, double phase,
                                       Index cap = kCompositeCap) {
  validate_model(ops);
  const Index d = ops.dim();
  const Index n2 = (2 * d) * (2 * d);
  if (n2 > cap) {
    throw Error(ErrorCode::DimensionCap,
                "composite Liouvillian " + std::to_string(n2) + " exceeds cap " + std::to_string(cap));
  }
  int n_spins = 0;
  while ((Index{1} << n_spins) < d) ++n_spins;
  if ((Index{1} << n_spins) != d) throw Error(ErrorCode::DimensionMismatch, "bath dimension is not a power of two");

  const Operator h = kron(spin::sz(), ops.b) + kron(identity(2), ops.he);
  std::vector<Dissipator> diss;
  for (const auto& k : bath_dissipators(noise, n_spins)) diss.push_back({kron(identity(2), k.op), k.rate});
  const SuperOperator g = expm_general(liouvillian(h, diss), t);

  Eigen::VectorXcd zero = Eigen::VectorXcd::Zero(2);
  zero(0) = 1.0;
  const Operator prep = kron(Operator(qubit_rotation(phase, kPi / 2.0) * zero), identity(d));
  const Operator readout = qubit_rotation(0.0, kPi / 2.0);
  const SuperOperator in = conjugation(prep);

  std::vector<SuperOperator> maps;
  for (int a = 0; a < 2; ++a) {
    const Operator ka = kron(Operator(readout.row(a)), identity(d));
    maps.push_back(conjugation(ka) * g * in);
  }
  return make_instrument(std::move(maps[0]), std::move(maps[1]));
}

/// Superoperator Frobenius distance, max over the two branches.
inline double instrument_distance(const Instrument& a, const Instrument& b) {
  return std::max((a.e0 - b.e0).norm(), (a.e1 - b.e1).norm());
}

inline TrajectoryEnsemble run_noisy_ensemble(const Operator& rho0, const Instrument& in, EnsembleOptions opt) {
  return run_ensemble(rho0, in, std::move(opt));
}

}  // namespace steer

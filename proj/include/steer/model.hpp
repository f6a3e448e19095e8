#pragma once

// Central-spin model builders. Every builder returns the pair (B, H_e) that
// enters H = sigma_z (x) B + I (x) H_e, in rad/s. Bath spins are spin-1/2 with
// I = sigma/2; spin 0 is the leftmost tensor factor and |up> is basis index 0.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "steer/error.hpp"
#include "steer/operator_algebra.hpp"

namespace steer {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct ModelOperators {
  Operator b;
  Operator he;

  Index dim() const { return b.rows(); }
};

namespace spin {

inline Operator sx() {
  Operator m(2, 2);
  m << 0.0, 1.0, 1.0, 0.0;
  return m;
}
inline Operator sy() {
  Operator m(2, 2);
  m << 0.0, Complex(0.0, -1.0), Complex(0.0, 1.0), 0.0;
  return m;
}
inline Operator sz() {
  Operator m(2, 2);
  m << 1.0, 0.0, 0.0, -1.0;
  return m;
}
inline Operator ix() { return 0.5 * sx(); }
inline Operator iy() { return 0.5 * sy(); }
inline Operator iz() { return 0.5 * sz(); }

/// Component c (0, 1, 2 for x, y, z) of I = sigma/2.
inline Operator component(int c) {
  switch (c) {
    case 0: return ix();
    case 1: return iy();
    case 2: return iz();
    default: throw Error(ErrorCode::IndexOutOfRange, "spin component " + std::to_string(c));
  }
}

/// single-site operator op acting on site k of an n-site register
inline Operator embed(const Operator& op, int site, int n_sites) {
  if (site < 0 || site >= n_sites) {
    throw Error(ErrorCode::IndexOutOfRange,
                "site " + std::to_string(site) + " of " + std::to_string(n_sites));
  }
  Operator out = identity(1);
  for (int s = 0; s < n_sites; ++s) out = kron(out, s == site ? op : identity(2));
  return out;
}

inline Operator dot(const Vec3& a, int site, int n_sites) {
  Operator out = Operator::Zero(Index{1} << n_sites, Index{1} << n_sites);
  for (int c = 0; c < 3; ++c) {
    if (a(c) != 0.0) out += a(c) * embed(component(c), site, n_sites);
  }
  return out;
}

inline Operator total_z(int n_sites) {
  Operator out = Operator::Zero(Index{1} << n_sites, Index{1} << n_sites);
  for (int s = 0; s < n_sites; ++s) out += embed(iz(), s, n_sites);
  return out;
}

}  // namespace spin

inline void require_finite(const Vec3& v, const char* what) {
  if (!v.allFinite()) throw Error(ErrorCode::InvalidArgument, std::string(what) + " is not finite");
}

inline void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw Error(ErrorCode::InvalidArgument, std::string(what) + " is not finite");
}

/// B = A . I, H_e = omega_L I_z.
inline ModelOperators build_single_spin(const Vec3& a, double larmor) {
  require_finite(a, "hyperfine vector");
  require_finite(larmor, "Larmor frequency");
  return {spin::dot(a, 0, 1), larmor * spin::iz()};
}

/// n-th cosine coefficient of the CPMG modulation (square wave of period 4 tau,
/// +1 on the first and last quarter). The mean C_0 vanishes.
inline double cpmg_fourier_coefficient(int n) {
  if (n < 0) throw Error(ErrorCode::InvalidArgument, "negative harmonic");
  if (n == 0) return 0.0;
  return 4.0 / (n * kPi) * std::sin(n * kPi / 2.0);
}

struct Transverse {
  double magnitude = 0.0;  // A_perp
  double azimuth = 0.0;    // xi
};

inline Transverse transverse_part(const Vec3& a) {
  return {std::hypot(a(0), a(1)), std::atan2(a(1), a(0))};
}

/// First-harmonic rotating-frame model: B' = (2/pi) A_perp I_perp,
/// H'_e = detuning I_z.
inline ModelOperators build_dd_effective(const Vec3& a, double detuning) {
  require_finite(a, "hyperfine vector");
  require_finite(detuning, "detuning");
  const Transverse tr = transverse_part(a);
  const double scale = cpmg_fourier_coefficient(1) / 2.0 * tr.magnitude;
  const Vec3 axis(std::cos(tr.azimuth), std::sin(tr.azimuth), 0.0);
  return {spin::dot(scale * axis, 0, 1), detuning * spin::iz()};
}

// mu_0 / 4 pi in SI units, and hbar, for converting the dipolar energy to rad/s
inline constexpr double kMu0Over4Pi = 1.00000000055e-7;
inline constexpr double kHbar = 1.054571817e-34;
inline constexpr double kGamma13C = 6.728284e7;  // rad/s/T

/// Dipolar coupling strength in rad/s for two equal spins at distance r (m).
inline double dipolar_strength(double r, double gamma) {
  if (!(r > 0.0)) throw Error(ErrorCode::ZeroDisplacement, "distance must be positive");
  return kMu0Over4Pi * gamma * gamma * kHbar / (r * r * r);
}

/// D (1 - 3 r^ r^T).
inline Mat3 dipolar_tensor_from_strength(double coupling, const Vec3& direction) {
  const double n = direction.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw Error(ErrorCode::ZeroDisplacement, "displacement direction is zero");
  }
  const Vec3 u = direction / n;
  return coupling * (Mat3::Identity() - 3.0 * u * u.transpose());
}

inline Mat3 dipolar_tensor(const Vec3& r, double gamma) {
  return dipolar_tensor_from_strength(dipolar_strength(r.norm(), gamma), r);
}

struct DipolarCoupling {
  int j = 0;
  int k = 1;
  double coupling = 0.0;                    // D_jk, rad/s
  Vec3 direction = Vec3::UnitZ();           // only its orientation matters
};

/// From a displacement r_jk (m) and gyromagnetic ratio (rad/s/T).
inline DipolarCoupling dipolar_from_geometry(int j, int k, const Vec3& r, double gamma) {
  return {j, k, dipolar_strength(r.norm(), gamma), r};
}

struct BathSpin {
  Vec3 hyperfine = Vec3::Zero();  // rad/s
};

struct RimSequence {};

struct CpmgSequence {
  double tau = 0.0;                 // s
  int n_pulses = 0;                 // even
  std::optional<double> detuning;   // rad/s; defaults to omega_L - 2 pi / (4 tau)

  double duration() const { return 2.0 * n_pulses * tau; }
  double drive_frequency() const { return 2.0 * kPi / (4.0 * tau); }
};

using Sequence = std::variant<RimSequence, CpmgSequence>;

struct ModelSpec {
  std::vector<BathSpin> bath;
  double larmor = 0.0;                    // rad/s
  std::vector<DipolarCoupling> dipolar;
  Sequence sequence = RimSequence{};
  double t = 0.0;                         // s; ignored for CPMG (duration from tau, N)
  double phase = 0.0;                     // delta phi, rad
  bool secular = false;
  int max_spins = 4;

  double evolution_time() const {
    if (const auto* c = std::get_if<CpmgSequence>(&sequence)) return c->duration();
    return t;
  }
};

namespace detail {

inline Operator dipolar_term(const DipolarCoupling& c, int n, bool secular) {
  const Index d = Index{1} << n;
  Operator out = Operator::Zero(d, d);
  if (secular) {
    const double n2 = c.direction.squaredNorm();
    if (!(n2 > 0.0)) throw Error(ErrorCode::ZeroDisplacement, "dipolar direction is zero");
    const double cz2 = c.direction(2) * c.direction(2) / n2;
    const double s = c.coupling * (3.0 * cz2 - 1.0) / 2.0;
    for (int a = 0; a < 2; ++a) {
      out += s * spin::embed(spin::component(a), c.j, n) * spin::embed(spin::component(a), c.k, n);
    }
    out -= 2.0 * s * spin::embed(spin::iz(), c.j, n) * spin::embed(spin::iz(), c.k, n);
    return out;
  }
  const Mat3 tensor = dipolar_tensor_from_strength(c.coupling, c.direction);
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      if (tensor(a, b) == 0.0) continue;
      out += tensor(a, b) * spin::embed(spin::component(a), c.j, n) *
             spin::embed(spin::component(b), c.k, n);
    }
  }
  return out;
}

}  // namespace detail

/// K-spin bath: B = sum_k A_k . I_k and H_e = omega_L sum_k I_k^z + dipolar
/// terms (full tensor, or the energy-conserving part when secular). Under
/// CPMG the first-harmonic rotating-frame form is used instead.
inline ModelOperators build_multi_spin(const ModelSpec& spec) {
  const int n = static_cast<int>(spec.bath.size());
  if (n < 1) throw Error(ErrorCode::InvalidArgument, "bath must contain at least one spin");
  if (n > spec.max_spins) {
    throw Error(ErrorCode::TooManySpins,
                std::to_string(n) + " spins exceeds cap " + std::to_string(spec.max_spins));
  }
  require_finite(spec.larmor, "Larmor frequency");
  const Index d = Index{1} << n;
  ModelOperators ops{Operator::Zero(d, d), Operator::Zero(d, d)};

  if (const auto* cpmg = std::get_if<CpmgSequence>(&spec.sequence)) {
    if (cpmg->n_pulses <= 0 || cpmg->n_pulses % 2 != 0) {
      throw Error(ErrorCode::InvalidArgument, "CPMG pulse count must be positive and even");
    }
    if (!(cpmg->tau > 0.0)) throw Error(ErrorCode::InvalidArgument, "CPMG tau must be positive");
    if (!spec.dipolar.empty()) {
      throw Error(ErrorCode::InvalidArgument,
                  "dipolar couplings are not supported by the CPMG effective model");
    }
    const double detuning = cpmg->detuning.value_or(spec.larmor - cpmg->drive_frequency());
    for (int k = 0; k < n; ++k) {
      const ModelOperators one = build_dd_effective(spec.bath[k].hyperfine, detuning);
      ops.b += spin::embed(one.b, k, n);
      ops.he += spin::embed(one.he, k, n);
    }
    return ops;
  }

  for (int k = 0; k < n; ++k) {
    require_finite(spec.bath[k].hyperfine, "hyperfine vector");
    ops.b += spin::dot(spec.bath[k].hyperfine, k, n);
  }
  ops.he = spec.larmor * spin::total_z(n);
  for (const auto& c : spec.dipolar) {
    if (c.j == c.k || c.j < 0 || c.k < 0 || c.j >= n || c.k >= n) {
      throw Error(ErrorCode::IndexOutOfRange, "dipolar pair (" + std::to_string(c.j) + ", " +
                                                  std::to_string(c.k) + ")");
    }
    require_finite(c.coupling, "dipolar coupling");
    ops.he += detail::dipolar_term(c, n, spec.secular);
  }
  return ops;
}

/// Normalized commutator ||[B, H_e]||_F / (||B|| ||H_e|| + eps); zero for
/// commuting pairs, including H_e = 0.
inline double commutation_measure(const ModelOperators& ops) {
  const double num = commutator(ops.b, ops.he).norm();
  return num / (ops.b.norm() * ops.he.norm() + 1e-300);
}

/// eta = ||[H+, H-]|| / (||H+|| ||H-||) with H_pm = H_e pm B.
inline double noncommutativity_eta(const ModelOperators& ops) {
  const Operator hp = ops.he + ops.b;
  const Operator hm = ops.he - ops.b;
  const double np = hp.norm(), nm = hm.norm();
  if (np == 0.0 || nm == 0.0) throw Error(ErrorCode::ZeroOperator, "H+ or H- vanishes");
  return commutator(hp, hm).norm() / (np * nm);
}

inline void validate_model(const ModelOperators& ops, double tol = kDefaultTolerances.hermitian_input) {
  require_square(ops.b, "B");
  require_square(ops.he, "H_e");
  if (ops.b.rows() != ops.he.rows()) throw Error(ErrorCode::DimensionMismatch, "B and H_e differ in size");
  if (!is_hermitian(ops.b, tol)) throw Error(ErrorCode::NonHermitianInput, "B is not Hermitian");
  if (!is_hermitian(ops.he, tol)) throw Error(ErrorCode::NonHermitianInput, "H_e is not Hermitian");
}

}  // namespace steer

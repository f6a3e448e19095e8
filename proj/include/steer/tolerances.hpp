#pragma once

namespace steer {

/// Central table of numerical thresholds. Every routine that compares against
/// a tolerance takes one of these (defaulted), so callers can override per call.
struct Tolerances {
  double structural = 1e-10;   // unitarity, trace preservation, Hermiticity of outputs
  double algebraic = 1e-12;    // identities that hold to rounding
  double hermitian_input = 1e-10;
  double psd = 1e-8;           // most negative eigenvalue accepted as PSD
  double eigen_gap = 1e-8;     // eigenvalues closer than this count as clustered
  double eigen_condition = 1e10;
  double unit_eigenvalue = 1e-9;  // |lambda - 1| (or | |lambda| - 1 |) for peripheral spectrum
  double commute = 1e-10;      // normalized ||[B, H_e]|| below which the pair commutes
  double nullspace = 1e-9;     // relative singular value treated as zero
  double nullspace_gap = 1e-6; // next singular value must clear this for an unambiguous kernel
  double cluster = 1e-6;       // relative eigenvalue gap separating fixed-point blocks
  double zero_probability = 1e-14;
  double trajectory_psd = 1e-9;
  double resolvent_rcond = 1e-13;
};

inline constexpr Tolerances kDefaultTolerances{};

}  // namespace steer

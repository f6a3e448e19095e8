#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace steer {

enum class ErrorCode {
  InvalidArgument,
  DimensionMismatch,
  NonHermitianInput,
  NotPSD,
  ZeroDisplacement,
  ZeroOperator,
  TooManySpins,
  NotAChannel,
  NumericalDegeneracy,
  IndexOutOfRange,
  DivisionByZero,
  ZeroProbabilityBranch,
  TooLarge,
  SingularResolvent,
  NotCommuting,
  NegativeRate,
  DimensionCap,
  ConfigError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonHermitianInput: return "NonHermitianInput";
    case ErrorCode::NotPSD: return "NotPSD";
    case ErrorCode::ZeroDisplacement: return "ZeroDisplacement";
    case ErrorCode::ZeroOperator: return "ZeroOperator";
    case ErrorCode::TooManySpins: return "TooManySpins";
    case ErrorCode::NotAChannel: return "NotAChannel";
    case ErrorCode::NumericalDegeneracy: return "NumericalDegeneracy";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::DivisionByZero: return "DivisionByZero";
    case ErrorCode::ZeroProbabilityBranch: return "ZeroProbabilityBranch";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::SingularResolvent: return "SingularResolvent";
    case ErrorCode::NotCommuting: return "NotCommuting";
    case ErrorCode::NegativeRate: return "NegativeRate";
    case ErrorCode::DimensionCap: return "DimensionCap";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable code; every failure raised by the
/// library is one of these.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace steer

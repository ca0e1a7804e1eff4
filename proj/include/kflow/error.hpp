#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kflow {

enum class ErrorKind {
  NotSymmetric,
  NotPositiveDefinite,
  DimensionMismatch,
  NonFinite,
  ShapeMismatch,
  UnsupportedOp,
  NotScalar,
  TapeConsumed,
  UnknownTap,
  IndexOutOfRange,
  DuplicateIndex,
  InsufficientData,
  CoverageUnsatisfiable,
  DegenerateDenominator,
  InvalidSpec,
  InvalidProbability,
  InvalidConfig,
  BadMagic,
  CountMismatch,
  TruncatedFile,
  Io,
  DegenerateBatch,
  InvalidRange,
  NumericalFailure,
};

std::string_view to_string(ErrorKind kind);

/// Every library failure is reported as this exception; `kind()` is the
/// machine-checkable part, `what()` carries context for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace kflow

#include "kflow/error.hpp"

namespace kflow {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NotSymmetric: return "NotSymmetric";
    case ErrorKind::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::UnsupportedOp: return "UnsupportedOp";
    case ErrorKind::NotScalar: return "NotScalar";
    case ErrorKind::TapeConsumed: return "TapeConsumed";
    case ErrorKind::UnknownTap: return "UnknownTap";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::DuplicateIndex: return "DuplicateIndex";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::CoverageUnsatisfiable: return "CoverageUnsatisfiable";
    case ErrorKind::DegenerateDenominator: return "DegenerateDenominator";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::InvalidProbability: return "InvalidProbability";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::CountMismatch: return "CountMismatch";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::Io: return "Io";
    case ErrorKind::DegenerateBatch: return "DegenerateBatch";
    case ErrorKind::InvalidRange: return "InvalidRange";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
  }
  return "Unknown";
}

}  // namespace kflow

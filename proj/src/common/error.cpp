#include "common/error.hpp"

namespace voxelseg {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MissingModality: return "MissingModality";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidLabel: return "InvalidLabel";
    case ErrorCode::EmptyBrainMask: return "EmptyBrainMask";
    case ErrorCode::DegenerateIntensity: return "DegenerateIntensity";
    case ErrorCode::RangeError: return "RangeError";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::CheckpointError: return "CheckpointError";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::EmptyRegion: return "EmptyRegion";
    case ErrorCode::DegenerateGlcm: return "DegenerateGlcm";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::SpecError: return "SpecError";
  }
  return "Unknown";
}

}  // namespace voxelseg

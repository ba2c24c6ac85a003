#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace voxelseg {

enum class ErrorCode {
  InvalidArgument,
  ConfigError,
  IoError,
  ParseError,
  MissingModality,
  ShapeMismatch,
  InvalidLabel,
  EmptyBrainMask,
  DegenerateIntensity,
  RangeError,
  NonFiniteGradient,
  CheckpointError,
  EmptyMask,
  EmptyRegion,
  DegenerateGlcm,
  EmptyDataset,
  DimensionMismatch,
  SpecError,
};

std::string_view error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

// Same as require, but the message expression is only evaluated on failure.
// For hot paths whose messages concatenate strings.
#define VOXELSEG_REQUIRE(condition, code, message) \
  do {                                             \
    if (!(condition)) ::voxelseg::fail((code), (message)); \
  } while (0)

}  // namespace voxelseg

#pragma once

#include <stdexcept>
#include <string>

namespace flowdet {

// Error taxonomy. Codes group into the four CLI exit classes:
// config (2), numerical (3), io (4); everything else maps to invalid-argument.
enum class ErrorCode {
  InvalidBox,
  InvalidParameter,
  InvalidStrategy,
  InvalidCostMatrix,
  SizeMismatch,
  ShapeError,
  MissingGradient,
  MissingContext,
  InsufficientData,
  TooManyObjects,
  PlacementFailure,
  NumericalDivergence,
  StepSizeUnderflow,
  FormatError,
  VersionError,
  IoError,
  ConfigError,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace flowdet

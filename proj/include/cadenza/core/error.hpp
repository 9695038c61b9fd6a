#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cadenza {

enum class ErrorCode {
  MalformedMarker,
  LengthMismatch,
  DimMismatch,
  ShapeMismatch,
  IndexOutOfRange,
  DegenerateFrame,
  EmptyCorpus,
  TooLong,
  ConfigMismatch,
  EmptyBatch,
  GroupTooSmall,
  CapacityExceeded,
  SessionExhausted,
  BatchMismatch,
  BadCheckpoint,
  BadConfig,
  MissingPrerequisite,
  Io,
};

std::string_view error_code_name(ErrorCode code);

// Single exception type for the whole library; the code identifies the
// failure class named in each module's contract.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cadenza

#pragma once

#include <stdexcept>
#include <string>

namespace civiclens {

enum class ErrorCode {
  InvalidImage,
  InvalidParameter,
  UnsupportedEncoding,
  Precondition,
  Io,
  Validation,
  Parse,
  DanglingReference,
  EmptyManifest,
  Shape,
  InvalidLabel,
  TrainingDiverged,
  NoViableConfig,
  CheckpointVersion,
  CheckpointTruncated,
  CheckpointChecksum,
  EmptyEvaluation,
  NegativeGain,
  Configuration,
  IllegalTransition,
  Corruption,
  NotFound,
  BadCursor,
  Connectivity,
  BenchFailure,
};

const char* to_string(ErrorCode code) noexcept;

// Every failure raised by the library carries a code so callers (and the HTTP
// layer) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace civiclens

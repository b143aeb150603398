#include "civiclens/types.hpp"

#include "civiclens/error.hpp"

namespace civiclens {

IssueClass class_from_index(int index) {
  if (index < 0 || index >= kNumClasses) {
    throw Error(ErrorCode::InvalidLabel,
                "class label " + std::to_string(index) + " outside [0, 3)");
  }
  return static_cast<IssueClass>(index);
}

std::string_view class_token(IssueClass c) noexcept {
  switch (c) {
    case IssueClass::InfrastructureDamage: return "InfrastructureDamage";
    case IssueClass::WasteDisposal: return "WasteDisposal";
    case IssueClass::IllegalParkingMisc: return "IllegalParkingMisc";
  }
  return "?";
}

std::optional<IssueClass> parse_class_token(std::string_view token) noexcept {
  for (IssueClass c : kAllClasses) {
    if (class_token(c) == token) return c;
  }
  return std::nullopt;
}

std::string_view class_plain_name(IssueClass c) noexcept {
  switch (c) {
    case IssueClass::InfrastructureDamage: return "infrastructure damage";
    case IssueClass::WasteDisposal: return "waste disposal";
    case IssueClass::IllegalParkingMisc: return "illegal parking / miscellaneous issue";
  }
  return "?";
}

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidImage: return "invalid-image";
    case ErrorCode::InvalidParameter: return "invalid-parameter";
    case ErrorCode::UnsupportedEncoding: return "unsupported-encoding";
    case ErrorCode::Precondition: return "precondition";
    case ErrorCode::Io: return "io";
    case ErrorCode::Validation: return "validation";
    case ErrorCode::Parse: return "parse";
    case ErrorCode::DanglingReference: return "dangling-reference";
    case ErrorCode::EmptyManifest: return "empty-manifest";
    case ErrorCode::Shape: return "shape";
    case ErrorCode::InvalidLabel: return "invalid-label";
    case ErrorCode::TrainingDiverged: return "training-diverged";
    case ErrorCode::NoViableConfig: return "no-viable-config";
    case ErrorCode::CheckpointVersion: return "checkpoint-version";
    case ErrorCode::CheckpointTruncated: return "checkpoint-truncated";
    case ErrorCode::CheckpointChecksum: return "checkpoint-checksum";
    case ErrorCode::EmptyEvaluation: return "empty-evaluation";
    case ErrorCode::NegativeGain: return "negative-gain";
    case ErrorCode::Configuration: return "configuration";
    case ErrorCode::IllegalTransition: return "illegal-transition";
    case ErrorCode::Corruption: return "corruption";
    case ErrorCode::NotFound: return "not-found";
    case ErrorCode::BadCursor: return "bad-cursor";
    case ErrorCode::Connectivity: return "connectivity";
    case ErrorCode::BenchFailure: return "bench-failure";
  }
  return "unknown";
}

}  // namespace civiclens

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ltx {

enum class ErrorCode {
  ShapeMismatch,
  NonFiniteInput,
  DegenerateExtent,
  LabelOutOfRange,
  BackwardWithoutForward,
  NonScalarLoss,
  MaskShapeMismatch,
  MissingGradients,
  InvalidArgument,
  Io,
  VersionMismatch,
  ArchitectureMismatch,
  EmptyClass,
  ZeroVector,
  EmptyDataset,
  MissingConcept,
  MissingArtifact,
  Config,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::DegenerateExtent: return "DegenerateExtent";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::BackwardWithoutForward: return "BackwardWithoutForward";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::MaskShapeMismatch: return "MaskShapeMismatch";
    case ErrorCode::MissingGradients: return "MissingGradients";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ArchitectureMismatch: return "ArchitectureMismatch";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::MissingConcept: return "MissingConcept";
    case ErrorCode::MissingArtifact: return "MissingArtifact";
    case ErrorCode::Config: return "Config";
  }
  return "Unknown";
}

// Every failure in the library surfaces as ltx::Error; code() lets callers
// (and tests) branch on the category without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

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

}  // namespace ltx

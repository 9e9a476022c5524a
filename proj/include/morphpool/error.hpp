#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mp {

enum class ErrorCode {
  InvalidShape,
  ShapeMismatch,
  InvalidAxis,
  CorruptFile,
  NonScalarLoss,
  InvalidKernel,
  InvalidScale,
  WindowGap,
  CorruptProvenance,
  IncompleteFill,
  EmptyTarget,
  InvalidSpec,
  CorruptCheckpoint,
  DivergedTraining,
  ConfigMismatch,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidShape: return "InvalidShape";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidAxis: return "InvalidAxis";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::InvalidKernel: return "InvalidKernel";
    case ErrorCode::InvalidScale: return "InvalidScale";
    case ErrorCode::WindowGap: return "WindowGap";
    case ErrorCode::CorruptProvenance: return "CorruptProvenance";
    case ErrorCode::IncompleteFill: return "IncompleteFill";
    case ErrorCode::EmptyTarget: return "EmptyTarget";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::DivergedTraining: return "DivergedTraining";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace mp

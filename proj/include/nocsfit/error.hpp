#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nf {

enum class ErrorCode {
  LengthMismatch,
  DegenerateConfiguration,
  NoConsensus,
  EmptyCloud,
  ShapeMismatch,
  NonScalarLoss,
  UnknownCategory,
  TooFewVisiblePoints,
  FormatError,
  ChecksumMismatch,
  IoError,
  ConfigError,
  EmptyCategory,
  UnknownParameter,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::NoConsensus: return "NoConsensus";
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::UnknownCategory: return "UnknownCategory";
    case ErrorCode::TooFewVisiblePoints: return "TooFewVisiblePoints";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::EmptyCategory: return "EmptyCategory";
    case ErrorCode::UnknownParameter: return "UnknownParameter";
  }
  return "Unknown";
}

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace nf

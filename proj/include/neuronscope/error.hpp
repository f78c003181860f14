#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nscope {

// Coarse grouping used by the command line tool when reporting failures.
enum class ErrorCategory { BadInput, FormatError, DegenerateData, Internal };

enum class ErrorCode {
  InvalidArgument,
  OutOfRange,
  LengthMismatch,
  MalformedRecord,
  BadMagic,
  UnsupportedVersion,
  ChecksumMismatch,
  TruncatedFile,
  FormatError,
  ShapeMismatch,
  MismatchedCatalog,
  UnknownUnit,
  DegenerateLabels,
  NonFiniteScore,
  ZeroVariance,
  EmptyInput,
  NonFiniteLoss,
  Io,
  Internal,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MismatchedCatalog: return "MismatchedCatalog";
    case ErrorCode::UnknownUnit: return "UnknownUnit";
    case ErrorCode::DegenerateLabels: return "DegenerateLabels";
    case ErrorCode::NonFiniteScore: return "NonFiniteScore";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Internal: return "Internal";
  }
  return "Unknown";
}

constexpr ErrorCategory category_of(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::BadMagic:
    case ErrorCode::UnsupportedVersion:
    case ErrorCode::ChecksumMismatch:
    case ErrorCode::TruncatedFile:
    case ErrorCode::FormatError:
    case ErrorCode::MalformedRecord:
    case ErrorCode::ShapeMismatch:
      return ErrorCategory::FormatError;
    case ErrorCode::DegenerateLabels:
    case ErrorCode::NonFiniteScore:
    case ErrorCode::ZeroVariance:
    case ErrorCode::EmptyInput:
    case ErrorCode::NonFiniteLoss:
      return ErrorCategory::DegenerateData;
    case ErrorCode::Internal:
    case ErrorCode::Io:
      return ErrorCategory::Internal;
    default:
      return ErrorCategory::BadInput;
  }
}

constexpr std::string_view to_string(ErrorCategory cat) noexcept {
  switch (cat) {
    case ErrorCategory::BadInput: return "BadInput";
    case ErrorCategory::FormatError: return "FormatError";
    case ErrorCategory::DegenerateData: return "DegenerateData";
    case ErrorCategory::Internal: return "Internal";
  }
  return "Internal";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorCategory category() const noexcept { return category_of(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace nscope

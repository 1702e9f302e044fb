#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace headprobe {

enum class ErrorCode {
  MalformedDocument,
  ShapeMismatch,
  NonFiniteWeight,
  UnsupportedVersion,
  EmptyBatch,
  NonFiniteActivation,
  ConfigInvalid,
  EmptyConfigSet,
  KindMismatch,
  ZeroVector,
  DimensionTooSmall,
  RetriesExhausted,
  MarginUnsatisfiable,
  NoPositives,
  LengthMismatch,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedDocument: return "MalformedDocument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteWeight: return "NonFiniteWeight";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::EmptyConfigSet: return "EmptyConfigSet";
    case ErrorCode::KindMismatch: return "KindMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DimensionTooSmall: return "DimensionTooSmall";
    case ErrorCode::RetriesExhausted: return "RetriesExhausted";
    case ErrorCode::MarginUnsatisfiable: return "MarginUnsatisfiable";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
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

}  // namespace headprobe

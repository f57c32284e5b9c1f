#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace reto {

enum class ErrorCode {
  InvalidDimension,
  InvalidBase,
  NonFiniteInput,
  EmptyDataset,
  DegenerateGeometry,
  Shape,
  Configuration,
  Usage,
  NonFiniteGradient,
  NonFiniteLoss,
  Format,
  Version,
  Bounds,
  DegenerateChannel,
  UndefinedMetric,
  Domain,
  Parameter,
  Io,
  CheckpointMismatch,
  ResourceGuard,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidDimension: return "invalid-dimension";
    case ErrorCode::InvalidBase: return "invalid-base";
    case ErrorCode::NonFiniteInput: return "non-finite-input";
    case ErrorCode::EmptyDataset: return "empty-dataset";
    case ErrorCode::DegenerateGeometry: return "degenerate-geometry";
    case ErrorCode::Shape: return "shape";
    case ErrorCode::Configuration: return "configuration";
    case ErrorCode::Usage: return "usage";
    case ErrorCode::NonFiniteGradient: return "non-finite-gradient";
    case ErrorCode::NonFiniteLoss: return "non-finite-loss";
    case ErrorCode::Format: return "format";
    case ErrorCode::Version: return "version";
    case ErrorCode::Bounds: return "bounds";
    case ErrorCode::DegenerateChannel: return "degenerate-channel";
    case ErrorCode::UndefinedMetric: return "undefined-metric";
    case ErrorCode::Domain: return "domain";
    case ErrorCode::Parameter: return "parameter";
    case ErrorCode::Io: return "io";
    case ErrorCode::CheckpointMismatch: return "checkpoint-mismatch";
    case ErrorCode::ResourceGuard: return "resource-guard";
  }
  return "unknown";
}

// Every failure raised by the library carries a machine-checkable code.
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

inline void require(bool condition, ErrorCode code, std::string_view message) {
  if (!condition) fail(code, std::string(message));
}

// Non-fatal diagnostics (e.g. suspicious inputs). Defaults to stderr.
using WarningHandler = std::function<void(std::string_view)>;

inline WarningHandler& warning_handler() {
  static WarningHandler handler = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return handler;
}

inline void set_warning_handler(WarningHandler handler) { warning_handler() = std::move(handler); }

inline void warn(std::string_view message) {
  if (warning_handler()) warning_handler()(message);
}

}  // namespace reto

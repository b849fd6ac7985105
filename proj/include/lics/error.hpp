#pragma once

#include <stdexcept>
#include <string>

namespace lics {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration or contract violation detected before any work ran.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Shape or argument mismatch between tensors.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// File-level problems: missing files, truncated payloads, checksum mismatch.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Non-finite values where finite math was required.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// All candidate class boundaries are degenerate (zero significance gap).
struct DegenerateBoundary : Error {
  explicit DegenerateBoundary(const std::string& msg) : Error(msg) {}
};

}  // namespace lics

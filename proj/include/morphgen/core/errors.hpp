#pragma once

#include <stdexcept>
#include <string>

namespace morphgen {

/// Precondition/invariant violations on user-supplied values.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Filesystem and serialization failures.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed on-disk containers (bad magic, truncated payload, ...).
class ParseError : public IoError {
 public:
  explicit ParseError(const std::string& msg) : IoError(msg) {}
};

class CorruptCheckpointError : public IoError {
 public:
  explicit CorruptCheckpointError(const std::string& msg) : IoError(msg) {}
};

/// Numerical failures that survive regularization (e.g. matrix sqrt).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace morphgen

#pragma once

#include <stdexcept>
#include <string>

namespace art {

/// Caller passed a value that violates an operation's precondition
/// (shape mismatch, class index out of range, k larger than the map, ...).
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

/// Input is well-formed but the quantity is mathematically undefined for it,
/// e.g. a cosine with a zero-norm vector or Kendall tau on all-tied data.
class DegenerateInputError : public std::domain_error {
 public:
  explicit DegenerateInputError(const std::string& what) : std::domain_error(what) {}
};

/// A training step produced a NaN/Inf loss. The message carries diagnostics.
class NonFiniteLossError : public std::runtime_error {
 public:
  explicit NonFiniteLossError(const std::string& what) : std::runtime_error(what) {}
};

/// A required file or directory is missing or unreadable.
class PathError : public std::runtime_error {
 public:
  explicit PathError(const std::string& what) : std::runtime_error(what) {}
};

/// Resuming from an artifact whose config hash differs from the current config.
class ConfigMismatchError : public std::runtime_error {
 public:
  explicit ConfigMismatchError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace art

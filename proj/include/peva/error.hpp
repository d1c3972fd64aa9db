#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace peva {

/// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed PEVF container or manifest. Carries the byte offset at which
/// decoding failed (0 when the failure is not positional).
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset = 0)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Input that makes an operation ill-defined, e.g. an all-zero row to normalize.
class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dataset-level inconsistencies: out-of-range labels, too few shots.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InsufficientDataError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite loss or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace peva

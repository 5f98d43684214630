#pragma once

#include <stdexcept>
#include <string>

namespace bubbleformer {

/// Incompatible extents between operands, or a tensor of the wrong rank.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value left the finite range (NaN or Inf) inside a computation.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what, long index = -1)
      : std::runtime_error(what), index_(index) {}

  /// Frame / element index where the failure was detected, or -1.
  long index() const noexcept { return index_; }

 private:
  long index_;
};

/// Malformed, truncated or inconsistent input data (files, trajectories).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user configuration. `field` names the offending JSON path.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace bubbleformer

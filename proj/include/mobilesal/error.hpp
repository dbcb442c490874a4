#pragma once

#include <stdexcept>
#include <string>

namespace mobilesal {

// Base class for everything this library throws.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor extents / channel counts do not line up. The message names the
// offending axis.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Files, datasets, checkpoints: missing, malformed, truncated.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, failed tolerance checks.
class NumericError : public Error {
 public:
  using Error::Error;
};

// API used out of order (backward before forward, step without gradients).
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace mobilesal

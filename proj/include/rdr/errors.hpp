#pragma once

#include <stdexcept>
#include <string>

namespace rdr {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration; the message names the offending field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required (diverged training,
// NaN losses feeding node selection).
class NumericsError : public Error {
 public:
  using Error::Error;
};

// Unreadable, corrupt, or version-mismatched checkpoint file.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Tensor shape violation in an autodiff operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace rdr

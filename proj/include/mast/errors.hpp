#pragma once

#include <stdexcept>
#include <string>

namespace mast {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents do not line up (matmul inner dims, kernel larger than input, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: bad schedule, unknown preset, non-positive std.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-provided data: labels out of range, empty datasets.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed bytes on disk.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint does not match the schedule it is loaded into.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf escaped an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mast

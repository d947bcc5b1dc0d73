#pragma once

#include <stdexcept>
#include <string>

namespace snr {

/// Base of every error the library raises. `exit_code()` is the process
/// status the command-line front end maps the error to.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Precondition violated by the caller (bad label, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid pooling box or convolution geometry.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration key or value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced, or a gradient check failed.
class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Filesystem failure.
class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// File present but unreadable as the expected format.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// Checksum mismatch or truncated payload.
class CorruptionError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace snr

#pragma once

#include <stdexcept>
#include <string>

namespace polyseg {

// Error taxonomy. The CLI maps each family onto a process exit code.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A hyperparameter, flag or config value is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward() on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint does not match the experiment it is loaded into.
class VersionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace polyseg

#pragma once

#include <stdexcept>
#include <string>

namespace partvit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A model, augmentation or run configuration is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite or degenerate numeric input (zero-norm rows, NaN landmarks, ...).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A function expected to be deterministic produced different outputs.
class DeterminismError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace partvit

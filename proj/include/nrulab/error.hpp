#pragma once

#include <stdexcept>
#include <string>

namespace nrulab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not conform to an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An index (class id, slice bound) is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API precondition (e.g. backward from a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A function under numerical evaluation produced NaN.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, cell specification or task sizes.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file (IDX, corpus, checkpoint).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss, gradient or update.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// The requested operation is not supported by this cell kind.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace nrulab

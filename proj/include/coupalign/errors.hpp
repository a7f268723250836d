#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace coupalign {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible extents between operands.
struct DimensionError : Error {
  using Error::Error;
};

/// A documented precondition of an operation was violated.
struct ContractError : Error {
  using Error::Error;
};

/// Bad user-supplied input (token ids, masks, words).
struct InputError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

/// Dataset generation or loading failure.
struct DataError : Error {
  using Error::Error;
};

/// Malformed serialized data. `offset` is the byte position where decoding stopped.
struct FormatError : DataError {
  FormatError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset(offset) {}
  std::size_t offset;
};

struct UnsupportedVersionError : FormatError {
  using FormatError::FormatError;
};

/// NaN/Inf in values or gradients.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace coupalign

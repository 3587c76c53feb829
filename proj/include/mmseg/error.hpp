#pragma once

#include <stdexcept>
#include <string>

namespace mmseg {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or out-of-range axes/indices.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required (divergence, bad gradients).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or gradient and was stopped.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Misuse of the autodiff graph (non-scalar loss, consumed graph).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument that is not a shape problem (empty sets, bad enum values).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Configuration text that cannot be parsed or validated.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures (missing files, unwritable paths).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Structurally invalid tensor file.
class FormatError : public Error {
 public:
  enum class Kind { bad_magic, truncated, unsupported_dtype, bad_shape, trailing_bytes };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace mmseg

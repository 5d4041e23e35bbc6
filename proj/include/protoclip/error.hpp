#pragma once

#include <stdexcept>
#include <string>

namespace protoclip {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not chain.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, near-zero norms and diverging losses.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, schema or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace protoclip

#pragma once

#include <stdexcept>
#include <string>

namespace dualmod {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration: unknown key, malformed value, violated precondition on a config field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (shapes, masks, files).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A training step produced a non-finite loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace dualmod

#pragma once

#include <stdexcept>
#include <string>

namespace vqmir {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape or dimension mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf appeared in a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file, or an unsupported format version.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A required upstream artifact is missing or was produced by a different configuration.
class ArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace vqmir

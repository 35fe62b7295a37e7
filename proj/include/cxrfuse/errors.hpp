#pragma once

#include <stdexcept>
#include <string>

namespace cxrfuse {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or sequence dimensions do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside the domain of an operation (NaN/Inf, bad label, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Model used in the wrong mode (e.g. metadata passed to an image-only model).
class ModeError : public Error {
 public:
  using Error::Error;
};

/// File could not be read, written or parsed.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace cxrfuse

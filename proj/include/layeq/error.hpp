#pragma once

#include <stdexcept>
#include <string>

namespace layeq {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An invalid configuration value (e.g. a non-positive power exponent).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A malformed document. `field()` names the offending field path.
class ParseError : public Error {
 public:
  ParseError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// A documented precondition of an operation does not hold.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// A brute-force enumeration would exceed its size budget.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// The operation does not apply to this layer kind or activation.
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// Group elements of different variants or dimensions were combined.
class VariantMismatch : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace layeq

#pragma once

#include <stdexcept>
#include <string>

namespace nowcast {

// All library failures derive from Error so callers can catch one type and
// still branch on the concrete category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// A checkpoint written for one model variant loaded into another.
class VariantMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Raised by the trainer when the loss stops being finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace nowcast

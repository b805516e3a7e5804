#pragma once

#include <stdexcept>
#include <string>

namespace comvit {

// Every library failure derives from Error. The CLI maps the three families
// below onto its exit codes (usage/config = 1, format/IO = 2, numerical = 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad shapes, bad hyperparameters, bad indices: caller error.
class ConfigError : public Error {
 public:
  using Error::Error;
};
class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};
class IndexError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};
class RangeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};
class StateError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Malformed bytes on disk or in memory.
class FormatError : public Error {
 public:
  using Error::Error;
};
class SizeError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ContentError : public FormatError {
 public:
  using FormatError::FormatError;
};
class IncompatibleError : public FormatError {
 public:
  using FormatError::FormatError;
};
class IoError : public FormatError {
 public:
  using FormatError::FormatError;
};

// NaN/Inf where none is allowed, degenerate softmax rows, divergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace comvit

#pragma once

#include <stdexcept>
#include <string>

namespace hiptune {

// Every error raised by the library derives from Error so callers (and the
// CLI exit-code mapping) can tell validation problems from runtime failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration or user input. The CLI maps these to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class ValidationError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class LabelError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class ProtocolError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class MetricError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class NumericalDomainError : public Error {
 public:
  using Error::Error;
};

// A frozen component was mutated, or a stage precondition does not hold.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace hiptune

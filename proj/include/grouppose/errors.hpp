#pragma once

#include <stdexcept>
#include <string>

namespace grouppose {

// Base of every error raised by the library. The CLI maps these to exit
// code 1; usage errors are handled separately by the argument parser.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation (log of a
// non-positive value, temperature <= 0, uniform sample outside (0,1) ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A primitive produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
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

// Malformed or incompatible file content (bad magic, version, truncation).
class FormatError : public Error {
 public:
  using Error::Error;
};

class DegenerateError : public Error {
 public:
  using Error::Error;
};

}  // namespace grouppose

#pragma once

#include <stdexcept>
#include <string>

namespace critscen {

// Base class for all library errors. The CLI maps each subclass to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input document (JSON syntax, missing keys, wrong types).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Well-formed input that violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Factorization failure, power-flow divergence beyond the tolerated rate, etc.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace critscen

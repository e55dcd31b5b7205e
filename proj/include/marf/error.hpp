#pragma once

#include <stdexcept>
#include <string>

namespace marf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

/// A normal was requested at a point where it is undefined (zero-length direction).
class DegenerateNormalError : public Error {
 public:
  using Error::Error;
};

/// Reverse sweep reached an op that has no derivative rule.
class UnsupportedOpError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or version-mismatched file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient encountered during optimization.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace marf

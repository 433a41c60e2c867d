#pragma once

#include <stdexcept>
#include <string>

namespace scvlm {

// Base class for every error the library throws. Subclasses map onto the
// command-line exit-code contract (see tools/commands.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input data or violated invariant (manifest records, labels, ratios).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or logits during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Checkpoint does not match the data it is applied to (geometry, kind, shapes).
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace scvlm

#pragma once

#include <stdexcept>
#include <string>

namespace taxofuse {

// Exception hierarchy. The CLI maps each family to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed config, unknown flag value, missing file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Data that cannot be used as-is: lineage conflicts, unparseable files,
// fingerprint mismatches, out-of-coverage locations.
class DataError : public Error {
 public:
  using Error::Error;
};

// Tensor shape incompatibility inside the compute core.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace taxofuse

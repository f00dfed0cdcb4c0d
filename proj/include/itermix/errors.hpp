#pragma once

#include <stdexcept>
#include <string>

namespace itermix {

// Base class for every failure the library raises on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration: bad hyperparameter values, malformed manifest
// fields, split fractions that do not work out, and the like.
struct ConfigError : Error {
  using Error::Error;
};

// Broken input data: unparseable CSV cells, ragged rows, wrong window length.
struct DataError : Error {
  using Error::Error;
};

// API misuse: mismatched shapes, non-scalar loss, params that do not match
// the config they are used with.
struct ContractError : Error {
  using Error::Error;
};

// Shape mismatch between tensors; the message names both shapes.
struct ShapeError : ContractError {
  using ContractError::ContractError;
};

// A fitness evaluation inside a tuning run failed.
struct TuningError : Error {
  using Error::Error;
};

// Every trial of a hyperparameter search failed.
struct SearchError : Error {
  using Error::Error;
};

}  // namespace itermix

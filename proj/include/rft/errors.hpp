#pragma once

#include <stdexcept>
#include <string>

namespace rft {

// Base class for all errors thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape or rank mismatch; the message names the offending shapes.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration (files, flags, cross-field checks).
struct ConfigError : Error {
  using Error::Error;
};

// Malformed or unreadable data files (datasets, checkpoints).
struct DataError : Error {
  using Error::Error;
};

// Training aborted (non-finite loss, invalid state transitions).
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace rft

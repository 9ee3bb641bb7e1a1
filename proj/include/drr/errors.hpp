#pragma once

#include <stdexcept>
#include <string>

namespace drr {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Inconsistent dimensions anywhere in the numeric pipeline.
struct ShapeError : Error {
  using Error::Error;
};

// Malformed files or cohort contents.
struct DataError : Error {
  using Error::Error;
};

// Invalid configuration values.
struct ConfigError : Error {
  using Error::Error;
};

// Non-finite values, diverged optimizations, failed numeric self-checks.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace drr

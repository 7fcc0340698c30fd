#pragma once

#include <stdexcept>
#include <string>

namespace vx {

// Base for all library errors; the CLI maps subclasses onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or geometry.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
};

// A call-site contract was violated (e.g. non-scalar loss in backward).
struct ContractError : Error {
  using Error::Error;
};

// NaN/Inf produced, or a numerically impossible request.
struct NumericError : Error {
  using Error::Error;
};

// Dataset / file ingestion failures.
struct DataError : Error {
  using Error::Error;
};

}  // namespace vx

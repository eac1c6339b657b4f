#pragma once

#include <stdexcept>
#include <string>

namespace spn {

// Error taxonomy. The CLI maps these onto exit codes:
//   usage/config/dimension/input/training -> 1, I/O -> 2, verification -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct InputError : Error {
  using Error::Error;
};

struct UsageError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct TrainingError : Error {
  using Error::Error;
};

struct VerificationError : Error {
  using Error::Error;
};

}  // namespace spn

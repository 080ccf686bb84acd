#pragma once

#include <stdexcept>
#include <string>

namespace msgdn {

// Base class for all toolkit errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid model/plan/file configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Tensor shape disagreement.
struct ShapeError : Error {
  using Error::Error;
};

// File or external-process failure.
struct IoError : Error {
  using Error::Error;
};

}  // namespace msgdn

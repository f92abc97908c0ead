#pragma once

#include <stdexcept>
#include <string>

namespace maskdiff {

// Base of everything this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Argument outside the mathematical domain of an operation (e.g. t not in [0,1]).
struct DomainError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

// Bad user input: malformed configs, manifests, masks, CLI flags.
struct ValidationError : Error {
  using Error::Error;
};

struct TrainingError : Error {
  using Error::Error;
};

struct SamplingError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace maskdiff

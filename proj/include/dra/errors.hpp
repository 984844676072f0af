#pragma once

#include <stdexcept>
#include <string>

namespace dra {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or unknown configuration values (unknown dataset id, missing model, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller violated a precondition on an argument (shape mismatch, n <= 0, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// A file on disk could not be parsed. The message names the path.
class IngestionError : public Error {
 public:
  using Error::Error;
};

// Non-finite values appeared in a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A training loop diverged. The message carries the step index.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// The diffusion sampler produced non-finite pixels.
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace dra

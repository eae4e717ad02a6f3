#pragma once

#include <stdexcept>
#include <string>

namespace tvae {

// Base for every error raised by the library. Subclasses map onto the CLI
// exit codes (config=2, divergence=3, io=4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace tvae

#pragma once

#include <stdexcept>
#include <string>

namespace msfpca {

// Invalid configuration (bad dimensions, bad hyperparameters, malformed config files).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid input data (unparseable files, non-finite values, duplicate records).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure (rank deficiency, non-finite intermediates outside the sampler hot path).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace msfpca

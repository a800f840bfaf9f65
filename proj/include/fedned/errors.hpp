#pragma once

#include <stdexcept>
#include <string>

namespace fedned {

/// Inconsistent shapes, invalid hyperparameters, infeasible sizes.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument values at an operation boundary (empty batch, negative probabilities).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed input files. The message names the offending file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An operation invoked out of protocol order (e.g. pseudo training on an unflagged client).
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace fedned

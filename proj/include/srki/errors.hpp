#pragma once

#include <stdexcept>
#include <string>

namespace srki {

// Shape or dimension disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Inputs for which an operation is mathematically undefined
// (fully masked softmax row, empty loss span, empty candidate set).
struct DegenerateError : std::domain_error {
  using std::domain_error::domain_error;
};

// NaN/Inf observed where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed persisted data (checkpoints, JSONL).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace srki

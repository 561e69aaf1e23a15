#pragma once

#include <stdexcept>
#include <string>

namespace bmoe {

/// Invalid configuration or input that violates a documented precondition.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor shapes incompatible with the requested operation.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Out-of-range token id or index.
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated file content.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace bmoe

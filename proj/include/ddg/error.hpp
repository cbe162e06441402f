#pragma once

#include <stdexcept>
#include <string>

namespace ddg {

// Exception hierarchy. The CLI maps ValidationError (and subclasses) to exit
// code 1 and everything else to exit code 2.

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up.
struct DimensionError : ValidationError {
    using ValidationError::ValidationError;
};

/// Bad configuration values or inconsistent specs.
struct ConfigError : ValidationError {
    using ValidationError::ValidationError;
};

/// API misuse: wrong call order, missing saved state, bad CLI arguments.
struct UsageError : ValidationError {
    using ValidationError::ValidationError;
};

/// Malformed or truncated files.
struct FormatError : ValidationError {
    using ValidationError::ValidationError;
};

struct RangeError : ValidationError {
    using ValidationError::ValidationError;
};

/// NaN/Inf detected in a value that must be finite.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace ddg

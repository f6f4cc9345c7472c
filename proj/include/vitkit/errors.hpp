#pragma once

#include <stdexcept>
#include <string>

namespace vitkit {

// Error taxonomy shared by every module. The CLI maps ConfigError and
// DimensionError to exit code 1 (invalid request) and the remaining kinds
// to exit code 2 (runtime failure).

// Invalid hyperparameter or option combination.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape disagreement; messages carry both offending shapes.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed external file (dataset, checkpoint); messages carry the byte
// offset or tensor name where parsing failed.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical failure during evaluation or training (non-finite loss etc.).
struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// seq/par executions of the same model disagreed beyond tolerance.
struct ConsistencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace vitkit

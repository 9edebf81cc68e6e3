#pragma once

#include <stdexcept>
#include <string>

namespace dcn {

// Shape/rank violations in tensor operations.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Broken call contracts (non-scalar loss, non-binary mask, empty mask, ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration values or unknown keys.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File format / filesystem failures; message carries the path.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Undefined metric requests (e.g. AUC on a single-class split).
struct MetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Runtime failures during optimization (NaN gradients, diverged loss).
struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace dcn

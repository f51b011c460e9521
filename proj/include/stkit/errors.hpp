#pragma once

#include <stdexcept>
#include <string>

namespace stkit {

// Shape or dimension mismatch between operands.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration value (odd encoding dim, non-positive epsilon,
// unknown config key, ...).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Data outside the documented contract: out-of-vocabulary token, empty
// reference, malformed manifest line.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN or Inf where a finite value is required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Loss or gradients went non-finite during training.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// CTC target cannot be aligned to the given number of frames.
struct InfeasibleAlignmentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// WER threshold calibration cannot reach the requested corpus target.
struct CalibrationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint/parameter mismatch on load.
struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace stkit

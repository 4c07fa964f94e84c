#pragma once

#include <stdexcept>
#include <string>

namespace hitt {

// Tensor shape/usage violations (mismatched operands, bad kernel size, ...).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

// Non-finite values or training divergence.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& m) : std::runtime_error(m) {}
};

// Malformed on-disk artifacts (tensor files, manifests, bundles).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& m) : std::runtime_error(m) {}
};

// Bad experiment configuration (unknown keys, out-of-range values).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

// Missing inputs, unresolvable paths, or commands run out of order.
struct StateError : std::runtime_error {
    explicit StateError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace hitt

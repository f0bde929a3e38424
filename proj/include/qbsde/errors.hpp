#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qbsde {

/// Malformed or inconsistent user input (grids, clocks, config files).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A valid request the selected backend cannot serve.
struct UnsupportedConfiguration : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A non-finite value or a failed numerical precondition inside a solve.
struct NumericalError : std::runtime_error {
    NumericalError(const std::string& what, std::size_t step_index)
        : std::runtime_error(what + " (step " + std::to_string(step_index) + ")"), step(step_index) {}
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
    std::size_t step = static_cast<std::size_t>(-1);
};

/// A structural hypothesis required by a routine does not hold.
struct PreconditionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace qbsde

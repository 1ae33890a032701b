#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace gpssm {

/// Invalid user input: bad shapes, malformed config values, unknown keys.
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Configuration file problems; message carries the dotted key path.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// File-format and filesystem problems.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Linear-algebra failure (Cholesky breakdown, non-finite results).
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& what, std::vector<double> jitter = {})
        : std::runtime_error(what), attempted_jitter(std::move(jitter)) {}

    /// Jitter levels tried before giving up, when the failure came from a
    /// factorization with escalation; empty otherwise.
    std::vector<double> attempted_jitter;
};

}  // namespace gpssm

#pragma once

#include <stdexcept>
#include <string>

namespace flexdiff {

// Failure categories. The C API maps each onto a status code and the CLI onto
// an exit code (2 usage, 3 data, 4 numerical divergence).
enum class ErrorKind {
    Domain,         // argument outside the mathematical domain (e.g. t outside [0,1])
    Shape,          // tensor/grid shape mismatch or indivisible size
    Config,         // invalid configuration or config mismatch on load
    Parameter,      // invalid scalar parameter (factor, std, member count, ...)
    Consistency,    // inputs that violate a cross-field invariant
    Ordering,       // time ordering violated (DDIM t_to >= t_from)
    Context,        // conditioning context incomplete or wrong for the task
    BatchLayout,    // multitask batch not grouped SR-before-FC
    Coverage,       // stitching left pixels uncovered
    UndefinedMetric,
    Estimator,      // statistical estimator cannot be evaluated
    Iteration,      // iterative method did not converge
    Io,
    Data,           // dataset too small, empty, or malformed
    Divergence,     // non-finite values during simulation or training
    Usage,
    Internal,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) throw Error(kind, message);
}

} // namespace flexdiff

#pragma once

#include <stdexcept>
#include <string>

namespace tg {

/// Raised when caller-supplied data or configuration violates a precondition.
/// The CLI maps it to exit code 2.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for failures that happen while doing otherwise valid work
/// (I/O, divergence, transport). The CLI maps it to exit code 1.
class RuntimeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace tg

#pragma once

#include <stdexcept>
#include <string>

namespace vct {

// Bad input: shapes, ranges, unknown names, mismatched artifacts. CLI exit code 2.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite values, divergence. CLI exit code 3.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Rethrows the in-flight exception with `stage` prefixed to its message,
// preserving the ValidationError / NumericalError distinction.
[[noreturn]] void rethrow_with_stage(const std::string& stage);

}  // namespace vct

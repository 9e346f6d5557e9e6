#pragma once

#include <stdexcept>
#include <string>

namespace qsm {

// Invalid arguments, mismatched geometry, malformed files. The CLI maps these to exit code 1.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf in a loss or iterate, or a diverging solver. The CLI maps these to exit code 2.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class IoErrorKind {
    CannotOpen,
    MalformedHeader,
    SizeMismatch,
    NonFinitePayload,
};

class IoError : public InputError {
public:
    IoError(IoErrorKind kind, const std::string& what) : InputError(what), kind_(kind) {}
    IoErrorKind kind() const noexcept { return kind_; }

private:
    IoErrorKind kind_;
};

} // namespace qsm

#ifndef IDPATCH_ERRORS_HPP
#define IDPATCH_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace idpatch {

// Error categories map one-to-one onto CLI exit codes:
//   ConfigError -> 2, PreconditionError -> 3, RuntimeFailure -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PreconditionError : std::runtime_error {
    explicit PreconditionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RuntimeFailure : std::runtime_error {
    explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : PreconditionError {
    explicit ShapeError(const std::string& msg) : PreconditionError(msg) {}
};

struct NumericalError : RuntimeFailure {
    explicit NumericalError(const std::string& msg) : RuntimeFailure(msg) {}
};

}  // namespace idpatch

#endif  // IDPATCH_ERRORS_HPP

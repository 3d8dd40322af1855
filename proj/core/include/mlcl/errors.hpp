#ifndef MLCL_ERRORS_HPP
#define MLCL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace mlcl {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration (bad field values, unresolvable references).
/// Messages name the offending field.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

/// Shape or domain mismatch between runtime values.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

/// Numeric failure (non-finite loss, degenerate normalization, ...).
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

/// File and serialization problems.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

} // namespace mlcl

#endif

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace somer {

/// Root of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Non-finite values, empty softmax, degenerate numerics.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Input data violates a precondition (duplicates, dangling references, empty sets).
class DataError : public Error {
public:
    using Error::Error;
};

/// Filesystem failures.
class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed record in a line-oriented file.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace somer

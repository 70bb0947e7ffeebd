#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace xvl {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf encountered, or a gradient that cannot be formed.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Input rejected on purpose instead of silently producing NaN (zero-norm rows).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class GraphError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class MissingLabelsError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    DataError(const std::string& file, std::size_t line, const std::string& what)
        : Error(file + ":" + std::to_string(line) + ": " + what), file_(file), line_(line) {}
    explicit DataError(const std::string& what) : Error(what) {}

    const std::string& file() const { return file_; }
    std::size_t line() const { return line_; }

private:
    std::string file_;
    std::size_t line_ = 0;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace xvl

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace rabsde {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A precondition on user-supplied data was violated.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Malformed driver expression; `offset` is the byte offset into the source.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " at offset " + std::to_string(offset)), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Expression evaluation failure (unbound variable, division by zero, non-finite result).
class EvalError : public Error {
public:
    using Error::Error;
};

/// An iterative procedure stopped before reaching its tolerance.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, std::vector<double> history)
        : Error(what), history_(std::move(history)) {}

    const std::vector<double>& history() const noexcept { return history_; }

private:
    std::vector<double> history_;
};

/// Brute-force enumeration requested on an instance that is too large.
class EnumerationLimit : public Error {
public:
    using Error::Error;
};

/// File could not be read or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// A scenario document failed validation. Every problem is listed with the
/// JSON pointer of the offending value.
class SchemaError : public Error {
public:
    struct Issue {
        std::string pointer;
        std::string message;
    };

    explicit SchemaError(std::vector<Issue> issues) : Error(summary(issues)), issues_(std::move(issues)) {}

    const std::vector<Issue>& issues() const noexcept { return issues_; }

private:
    static std::string summary(const std::vector<Issue>& issues) {
        std::string s = "invalid scenario file:";
        for (const auto& i : issues) s += "\n  " + (i.pointer.empty() ? std::string("/") : i.pointer) + ": " + i.message;
        return s;
    }

    std::vector<Issue> issues_;
};

}  // namespace rabsde

#pragma once

#include <stdexcept>
#include <string>

namespace stabforge {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class LexError : public Error {
public:
    LexError(const std::string& what, std::size_t line, std::size_t column)
        : Error("lex error at " + std::to_string(line) + ":" + std::to_string(column) + ": " + what),
          line_(line), column_(column) {}
    std::size_t line() const noexcept { return line_; }
    std::size_t column() const noexcept { return column_; }

private:
    std::size_t line_;
    std::size_t column_;
};

/// Renaming or snippet insertion would produce invalid code.
class ValidityError : public Error {
public:
    using Error::Error;
};

/// Checkpoint or data file failed an integrity check.
class CorruptionError : public Error {
public:
    using Error::Error;
};

/// Not enough candidate tokens to assign distinct triggers.
class InfeasibleError : public Error {
public:
    using Error::Error;
};

/// The sample has no modifiable identifiers; identifier attacks skip it.
class NoIdentifiers : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// A pipeline stage failed; wraps the underlying error with the stage name.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what) : Error("stage " + stage + " failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

} // namespace stabforge

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lightdarts {

// Base for every error the library raises. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes or channel counts do not agree with what an operation needs.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A loss, gradient or logit became NaN/Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// A binary or text file does not follow its documented format.
class FormatError : public Error {
 public:
  enum class Kind { bad_magic, unsupported_version, truncated, dimension_overflow, malformed };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Text parse failure with a 1-based source position.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, std::size_t column, const std::string& message)
      : Error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + message),
        line_(line),
        column_(column),
        message_(message) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::size_t line_;
  std::size_t column_;
  std::string message_;
};

}  // namespace lightdarts

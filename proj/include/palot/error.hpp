#pragma once

#include <stdexcept>
#include <string>

namespace palot {

// Root of every error the library raises. Callers that only care about
// "something went wrong inside palot" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension or shape contract violated.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside its documented domain (zero norm, non-positive bandwidth, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A NaN/Inf appeared where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Kernel or plan became non-finite inside a solver.
class OverflowError : public NumericError {
 public:
  using NumericError::NumericError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. `line` is 1-based; 0 when not line oriented.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Records disagree in a way that cannot be resolved automatically.
class ConflictError : public Error {
 public:
  using Error::Error;
};

inline void require(bool ok, const char* msg) {
  if (!ok) throw DomainError(msg);
}

}  // namespace palot

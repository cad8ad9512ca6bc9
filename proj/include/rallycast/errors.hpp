#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rallycast {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters, options or statistics.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An object was used out of its lifecycle order (tape reuse, graph phase).
class StateError : public Error {
 public:
  using Error::Error;
};

// A caller violated a precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input data that breaks a domain invariant (alternation, serve rule, ...).
class ValidationError : public Error {
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

}  // namespace rallycast

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace maxs {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  std::vector<std::string> violations_;
};

// Policy gateway failures.
class PolicyFailure : public Error {
 public:
  using Error::Error;
};
class TransportError : public PolicyFailure {
 public:
  using PolicyFailure::PolicyFailure;
};
class PolicyError : public PolicyFailure {
 public:
  using PolicyFailure::PolicyFailure;
};
class EmptyStep : public PolicyFailure {
 public:
  using PolicyFailure::PolicyFailure;
};
class ScoringUnsupported : public PolicyFailure {
 public:
  using PolicyFailure::PolicyFailure;
};

// Tool runtime failures.
class MalformedDirective : public Error {
 public:
  using Error::Error;
};
class InterpreterMissing : public Error {
 public:
  using Error::Error;
};

// Harness failures.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};
class DuplicateId : public Error {
 public:
  using Error::Error;
};

class TreeTooLarge : public Error {
 public:
  using Error::Error;
};

inline ConfigError::ConfigError(std::vector<std::string> violations)
    : Error([&] {
        std::string msg = "invalid config:";
        for (const auto& v : violations) msg += " " + v + ";";
        return msg;
      }()),
      violations_(std::move(violations)) {}

}  // namespace maxs

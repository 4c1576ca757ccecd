#pragma once

#include <stdexcept>
#include <string>

namespace elb {

// Exception family used across the toolchain. The CLI maps each type to a
// fixed exit status (usage 2, parse 3, infeasible 4, i/o 5).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

class ParseError : public Error {
 public:
  ParseError(const std::string& msg, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
  int line() const noexcept { return line_; }
  const char* kind() const noexcept override { return "parse"; }

 private:
  int line_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

class QuantError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "quant"; }
};

class InfeasibleError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "infeasible"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

class UsageError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "usage"; }
};

}  // namespace elb

#pragma once

#include <stdexcept>
#include <string>

namespace brltm {

// Base of every error raised by the library. The CLI maps subclasses onto
// process exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error("parse error: " + what) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error("validation error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("I/O error: " + what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error: " + what) {}
};

class IncompatibleError : public Error {
 public:
  explicit IncompatibleError(const std::string& what) : Error("incompatible: " + what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

class RangeError : public Error {
 public:
  explicit RangeError(const std::string& what) : Error("range error: " + what) {}
};

// Precondition violated by the caller (a bug upstream, not bad input data).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract violation: " + what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric failure: " + what) {}
};

class MetricError : public Error {
 public:
  explicit MetricError(const std::string& what) : Error("undefined metric: " + what) {}
};

class SplitError : public Error {
 public:
  explicit SplitError(const std::string& what) : Error("split error: " + what) {}
};

}  // namespace brltm

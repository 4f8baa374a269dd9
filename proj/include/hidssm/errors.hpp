#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace hidssm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or settings that do not fit together.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Overflow or NaN during a scan, loss or gradient evaluation.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, std::optional<std::size_t> timestep = std::nullopt)
      : Error(what), timestep_(timestep) {}

  std::optional<std::size_t> timestep() const { return timestep_; }

 private:
  std::optional<std::size_t> timestep_;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

// Infeasible synthetic-data request.
class SpecError : public Error {
 public:
  using Error::Error;
};

// Mismatched prediction / label inputs to the metrics.
class InputError : public Error {
 public:
  using Error::Error;
};

enum class ParseErrorKind { io, bad_header, bad_magic, unsupported_version, truncated, length_mismatch, bad_value, trailing_data };

inline const char* to_string(ParseErrorKind kind) {
  switch (kind) {
    case ParseErrorKind::io: return "io";
    case ParseErrorKind::bad_header: return "bad_header";
    case ParseErrorKind::bad_magic: return "bad_magic";
    case ParseErrorKind::unsupported_version: return "unsupported_version";
    case ParseErrorKind::truncated: return "truncated";
    case ParseErrorKind::length_mismatch: return "length_mismatch";
    case ParseErrorKind::bad_value: return "bad_value";
    case ParseErrorKind::trailing_data: return "trailing_data";
  }
  return "unknown";
}

class ParseError : public Error {
 public:
  ParseError(ParseErrorKind kind, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ParseErrorKind kind() const { return kind_; }

 private:
  ParseErrorKind kind_;
};

}  // namespace hidssm

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spvd {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Row or segment index outside its valid range, or an unsorted segment list.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. Carries the line (text formats) or byte offset
/// (binary payloads) where parsing stopped.
class ParseError : public Error {
 public:
  enum class Unit { kLine, kByte };

  ParseError(const std::string& what, std::size_t location, Unit unit)
      : Error(what + (unit == Unit::kLine ? " (line " : " (byte offset ") +
              std::to_string(location) + ")"),
        location_(location),
        unit_(unit) {}

  std::size_t location() const noexcept { return location_; }
  Unit unit() const noexcept { return unit_; }

 private:
  std::size_t location_;
  Unit unit_;
};

/// Corrupt, truncated or version-mismatched checkpoint.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace spvd

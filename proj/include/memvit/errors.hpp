#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace memvit {

/// Operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller violated an operation's precondition (wrong bank, non-scalar
/// loss, inference-only call made in training mode, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A model/pool/task configuration cannot be realized.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed serialized input. `offset()` is the byte (or character) position
/// where decoding failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace memvit

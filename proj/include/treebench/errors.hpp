#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace treebench {

// Caller broke a documented precondition (shapes, ranges, arities).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A computation produced NaN/Inf, or a loss/update went non-finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed ListOps token sequence. `index` is the offending token position
// (equal to the token count when the error is detected at end of input).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t index)
      : std::runtime_error(what + " at token " + std::to_string(index)),
        index_(index) {}

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

}  // namespace treebench

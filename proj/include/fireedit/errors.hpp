#pragma once

#include <stdexcept>
#include <string>

namespace fireedit {

// Shape disagreement between operands.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated precondition (bad argument, wrong state).
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN or other non-finite input where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid run configuration, unreadable file or mismatched checkpoint.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fireedit

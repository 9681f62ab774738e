#pragma once

#include <stdexcept>
#include <string>

namespace salgpode {

/// Caller broke a documented precondition (dimension mismatch, empty input, ...).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A linear-algebra or optimization step could not be completed
/// (Cholesky failure after jitter escalation, NaN objective, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StepBudgetError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Malformed or version-mismatched persisted document.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid experiment configuration (unknown key, bad value).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace salgpode

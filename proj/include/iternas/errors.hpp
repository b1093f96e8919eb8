#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace iternas {

/// Base class for all engine errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid configuration (bad search space, bad config file, bad values).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Budget vectors violate tau_backbone + tau_head <= tau_total.
class BudgetError : public Error {
 public:
  using Error::Error;
};

/// Text could not be parsed; carries a 1-based character offset.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// A genome references indices outside the search space, or its shape
/// does not match the space. Carries the offending field name.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& field, const std::string& what)
      : Error("field '" + field + "': " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// No feasible genome could be produced within the sampling budget;
/// signals that the cost budgets are unsatisfiable over the space.
class InfeasibleSpaceError : public Error {
 public:
  using Error::Error;
};

/// Fitness oracle failure (child process error, timeout, bad output).
class OracleError : public Error {
 public:
  using Error::Error;
};

/// Too few records to fit the accuracy predictor.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

}  // namespace iternas

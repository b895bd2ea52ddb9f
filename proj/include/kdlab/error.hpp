#pragma once

#include <stdexcept>
#include <string>

namespace kdlab {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A token id outside [0, V).
class InvalidToken : public Error {
 public:
  using Error::Error;
};

// KL term with zero probability on the reference side and positive mass on the other.
class InfiniteDivergence : public Error {
 public:
  using Error::Error;
};

// Exhaustive enumeration would exceed the configured budget.
class BudgetExceeded : public Error {
 public:
  BudgetExceeded(double required, double budget)
      : Error("enumeration budget exceeded: need " + std::to_string(required) +
              " sequences, budget is " + std::to_string(budget)),
        required_(required),
        budget_(budget) {}

  double required() const { return required_; }
  double budget() const { return budget_; }

 private:
  double required_;
  double budget_;
};

}  // namespace kdlab

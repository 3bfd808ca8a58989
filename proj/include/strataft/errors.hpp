#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace strataft {

/// Invalid input: malformed files, inconsistent sampling designs, bad configuration.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numeric breakdown: singular systems, degenerate survival estimates, failed calibration.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Iteration limit reached. Carries the sup-norm delta trace of the failed loop.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> trace)
      : std::runtime_error(what), trace_(std::move(trace)) {}

  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

}  // namespace strataft

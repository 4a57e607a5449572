#pragma once

#include <stdexcept>
#include <string>

namespace metricmatch {

// Invalid input or configuration: the caller can fix it. The CLI maps these
// to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Missing CSV column or unknown schema entry.
class SchemaError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, long row, long col)
      : ValidationError(what), row_(row), col_(col) {}
  long row() const { return row_; }
  long col() const { return col_; }

 private:
  long row_;
  long col_;
};

// Failure while computing: divergence, non-convergence, degenerate input
// discovered mid-run. The CLI maps these to exit code 2.
class ComputeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDiverged : public ComputeError {
 public:
  using ComputeError::ComputeError;
};

class NonConvergence : public ComputeError {
 public:
  using ComputeError::ComputeError;
};

class DegenerateSpace : public ComputeError {
 public:
  using ComputeError::ComputeError;
};

}  // namespace metricmatch

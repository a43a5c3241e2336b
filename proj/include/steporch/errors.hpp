#pragma once

#include <stdexcept>
#include <string>

namespace steporch {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map validation failures and runtime failures to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied something malformed: bad ids, bad frames, bad scenario.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class RangeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class AlignmentError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class StructureError : public ValidationError {
 public:
  StructureError(const std::string& what, std::size_t offending_index)
      : ValidationError(what), index_(offending_index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class LifecycleError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class MalformedDirectiveError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class InvariantViolation : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class OverBudgetError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ComparisonError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class FrameError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Failure talking to an external backend. Retryable failures are transport
// problems (connection refused, timeout, 5xx).
class BackendError : public Error {
 public:
  BackendError(const std::string& what, bool retryable)
      : Error(what), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

}  // namespace steporch

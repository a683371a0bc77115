#pragma once

#include <stdexcept>
#include <string>

namespace gibbscs {

// Root of every error thrown by the library. Each subclass maps onto one
// process exit code in the command-line tool.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Arguments or shapes that violate an operation's preconditions.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Non-finite intermediate values or impossible probability vectors.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Iterative solver failed to reach its tolerance.
class SolverError : public NumericalError {
 public:
  SolverError(const std::string& what, double final_residual, int iterations)
      : NumericalError(what), final_residual_(final_residual), iterations_(iterations) {}

  double final_residual() const noexcept { return final_residual_; }
  int iterations() const noexcept { return iterations_; }

 private:
  double final_residual_;
  int iterations_;
};

// Cholesky factorization of a precision matrix failed.
class NotPositiveDefinite : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A model or record file whose format_version this build does not read.
class VersionError : public IoError {
 public:
  VersionError(const std::string& what, long found)
      : IoError(what), found_(found) {}
  long found() const noexcept { return found_; }

 private:
  long found_;
};

// A file that is truncated or does not follow its schema.
class MalformedFile : public IoError {
 public:
  using IoError::IoError;
};

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kSuccess = 0,
  kArgument = 2,
  kIo = 3,
  kNumerical = 4,
};

// Maps an exception (by dynamic type) to the tool's exit code.
ExitCode exit_code_for(const std::exception& e) noexcept;

}  // namespace gibbscs

#pragma once

#include <stdexcept>
#include <string>

namespace knudsen {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation (point outside the
/// disk, empty quadrature slice, time outside a grid).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Problem data that violate a stated invariant, e.g. the compatibility
/// condition between initial and boundary data.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent grids, options or run configuration.
class ConfigurationError : public Error {
 public:
  using Error::Error;
};

/// Linear-solve failure and similar numerical breakdowns.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A fixed-point iteration that did not reach its tolerance.
class IterationError : public Error {
 public:
  IterationError(const std::string& what, double residual, int iterations)
      : Error(what + " (residual " + std::to_string(residual) + " after " +
              std::to_string(iterations) + " iterations)"),
        residual_(residual),
        iterations_(iterations) {}

  double residual() const noexcept { return residual_; }
  int iterations() const noexcept { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

/// Failure of one run inside a multi-run study; carries the eps of that run.
class StudyError : public Error {
 public:
  StudyError(const std::string& what, double eps) : Error(what), eps_(eps) {}

  double eps() const noexcept { return eps_; }

 private:
  double eps_;
};

}  // namespace knudsen

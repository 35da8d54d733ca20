#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace scorewatch {

/// Base class for all errors thrown by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Parameter vector (or configuration value) outside the model's admissible domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Non-finite intermediate produced while replaying a tape. Carries the node index.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::int64_t node) : Error(what), node_(node) {}
  std::int64_t node() const noexcept { return node_; }

 private:
  std::int64_t node_;
};

/// A guarded quantity fell below its numeric floor (e.g. an HMM normalizer).
class DegeneracyError : public Error {
 public:
  DegeneracyError(const std::string& what, std::int64_t index) : Error(what), index_(index) {}
  std::int64_t index() const noexcept { return index_; }

 private:
  std::int64_t index_;
};

/// A dense object would exceed a configured size cap.
class SizeError : public Error {
 public:
  using Error::Error;
};

/// Linear solve failed or did not converge; carries the final residual norm.
class ConditioningError : public Error {
 public:
  ConditioningError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// Optimizer did not reach the requested tolerance; carries the best iterate.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, Eigen::VectorXd best, int iterations,
                   double grad_norm)
      : Error(what), best_(std::move(best)), iterations_(iterations), grad_norm_(grad_norm) {}
  const Eigen::VectorXd& best() const noexcept { return best_; }
  int iterations() const noexcept { return iterations_; }
  double grad_norm() const noexcept { return grad_norm_; }

 private:
  Eigen::VectorXd best_;
  int iterations_;
  double grad_norm_;
};

/// Malformed input file or CLI configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bootstrap or threshold construction failed.
class CalibrationError : public Error {
 public:
  using Error::Error;
};

}  // namespace scorewatch

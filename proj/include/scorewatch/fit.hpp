#pragma once

// Maximum-likelihood fitting: BFGS with a backtracking line search over a
// tape recorded once per fit. Models with simplex-constrained parameter
// groups are optimized through a logit reparameterization and the estimate is
// mapped back to the natural coordinates.

#include <Eigen/Core>

#include "scorewatch/program.hpp"

namespace scorewatch {

struct FitOptions {
  double tol{1e-7};      // convergence on the max-norm of the score
  int max_iter{500};
  bool throw_on_failure{true};
};

struct FitResult {
  Eigen::VectorXd theta;  // natural coordinates
  int iterations{0};
  double grad_inf_norm{0.0};
  bool converged{false};
  double log_likelihood{0.0};
};

/// Fits the MLE over the full sample. `init` is in natural coordinates;
/// when empty the model's init_guess is used. Throws ConvergenceError
/// (carrying the best iterate) if the tolerance is not reached within
/// max_iter and options.throw_on_failure is set.
FitResult fit_mle(const ModelProgram& program, const ObservationSequence& data,
                  const Eigen::VectorXd& init = Eigen::VectorXd(),
                  const FitOptions& options = FitOptions());

namespace reparam {

/// Maps natural simplex coordinates to unconstrained logits and back for the
/// given groups; indices outside every group pass through unchanged.
Eigen::VectorXd to_logits(const Eigen::VectorXd& theta,
                          const std::vector<std::vector<int>>& groups);
Eigen::VectorXd to_natural(const Eigen::VectorXd& logits,
                           const std::vector<std::vector<int>>& groups);

}  // namespace reparam

}  // namespace scorewatch

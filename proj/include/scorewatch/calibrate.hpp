#pragma once

// Thresholds and significance machinery: chi-squared distribution functions
// via the regularized incomplete gamma function, Bonferroni-corrected
// thresholds for the linear and scan statistics, and parametric bootstrap
// calibration.

#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "scorewatch/program.hpp"

namespace scorewatch::detect {
struct DetectConfig;
}

namespace scorewatch::calib {

/// Regularized lower incomplete gamma P(a, x).
double gamma_p(double a, double x);
/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
double gamma_q(double a, double x);
/// log Q(a, x), stable far in the upper tail.
double log_gamma_q(double a, double x);

double chi2_cdf(int dof, double x);
double chi2_survival(int dof, double x);

/// Upper quantile: the x with P(chi2_dof > x) = upper_prob, solved by Newton
/// on log Q inside a bisection-safeguarded bracket. upper_prob in (0, 1).
double chi2_quantile(int dof, double upper_prob);

/// H_lin(alpha) = q_{chi2_d}(alpha / n); alpha_l = 0 yields +infinity.
double linear_threshold(int d, int n, double alpha_l);

/// H_p(alpha) = q_{chi2_p}(alpha / [C(d,p) n (p+1)^2]) for p = 1..P, with the
/// binomial computed in log space. Throws CalibrationError when the per-test
/// level underflows.
std::vector<double> scan_thresholds(int d, int n, int max_cardinality, double alpha_s);

struct ThresholdSet {
  double h_lin{0.0};
  std::vector<double> h_p;
  double alpha_l{0.0};
  double alpha_s{0.0};
  int n{0};
  int d{0};
  int max_cardinality{0};

  /// Builds the Bonferroni threshold set and checks its invariants
  /// (H_p increasing in p, sum 1/(p+1)^2 < 1).
  static ThresholdSet bonferroni(int d, int n, int max_cardinality, double alpha_l,
                                 double alpha_s);
};

enum class StatisticKind { kLinear, kScan };

struct BootstrapOptions {
  int replicates{500};
  double alpha{0.05};
  std::uint64_t seed{0};
  int jobs{1};
  double fit_tol{1e-6};
  int fit_max_iter{500};
};

/// Per-replicate (R_lin, normalized R_scan) pairs from a parametric bootstrap:
/// each replicate simulates a null dataset from the model at theta_hat,
/// refits the MLE warm-started at theta_hat, and runs the detection sweep
/// under `sweep`. Failed replicates are dropped; more than 10% failures is a
/// CalibrationError.
std::vector<std::pair<double, double>> bootstrap_statistics(const ModelProgram& program,
                                                            const ObservationSequence& data,
                                                            const Eigen::VectorXd& theta_hat,
                                                            const detect::DetectConfig& sweep,
                                                            const BootstrapOptions& options);

/// Empirical upper-alpha quantile of one bootstrap statistic.
double bootstrap_calibrate(const ModelProgram& program, const ObservationSequence& data,
                           const Eigen::VectorXd& theta_hat, StatisticKind kind,
                           const detect::DetectConfig& sweep, const BootstrapOptions& options);

/// Upper-alpha empirical quantile: the ceil((1-alpha) B)-th order statistic.
double empirical_upper_quantile(std::vector<double> values, double alpha);

}  // namespace scorewatch::calib

#pragma once

// Detection statistics: segment scores, matrix-free information operators,
// conjugate-gradient solves, the generalized score statistic R_n(tau), the
// truncated/scan statistics with diagonal-importance subset selection, and
// the combined auto-test sweep.
//
// Data positions (s, t, tau) are 1-based; component indices are 0-based in
// this API and 1-based in serialized reports.

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scorewatch/calibrate.hpp"
#include "scorewatch/program.hpp"

namespace scorewatch::detect {

enum class Method { kDirect, kCg };

/// Matrix-free symmetric PSD operator over an observed information block or
/// the partial (Schur-complement) information. Operators share evaluation
/// state with the context that created them and are not thread-safe.
class InformationOperator {
 public:
  enum class Kind { kSegment, kSchur, kSplit };
  using ApplyFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

  InformationOperator(int dim, Kind kind, ApplyFn apply)
      : dim_(dim), kind_(kind), apply_(std::move(apply)) {}

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return apply_(v); }
  int dim() const noexcept { return dim_; }
  Kind kind() const noexcept { return kind_; }

 private:
  int dim_;
  Kind kind_;
  ApplyFn apply_;
};

struct CgResult {
  Eigen::VectorXd x;
  int iterations{0};
  double rel_residual{0.0};
};

/// Conjugate gradients for op(x) = b. max_iter <= 0 defaults to 2*dim.
/// Throws ConditioningError when the residual target is not met.
CgResult cg_solve(const InformationOperator& op, const Eigen::VectorXd& b, double tol = 1e-7,
                  int max_iter = 0);

struct DetectConfig {
  double alpha_l{0.025};
  double alpha_s{0.025};
  int max_cardinality{0};  // 0 resolves to floor(sqrt(active dimension))
  Method method{Method::kCg};
  double tau_lo_frac{0.1};
  double tau_hi_frac{0.9};
  int tau_lo{0};  // explicit 1-based bounds override the fractions when > 0
  int tau_hi{0};
  std::vector<int> restrict_to;  // 0-based components; empty = all
  double cg_tol{1e-7};
  int cg_max_iter{0};  // 0 resolves to 2 * active dimension
  double ridge{0.0};   // optional explicit ridge, off by default
  int jobs{1};         // 0 resolves to the hardware concurrency
  double fit_tol{1e-6};
  int fit_max_iter{500};
  Eigen::VectorXd theta_hat;  // when non-empty the fit step is skipped
  Eigen::VectorXd fit_init;
  int bootstrap_replicates{0};  // > 0 switches to bootstrap calibration
  std::uint64_t bootstrap_seed{0};

  double alpha() const { return alpha_l + alpha_s; }
};

/// Returns a copy of the config restricted to the given 0-based components;
/// thresholds downstream use the subset size in place of d.
DetectConfig restrict_components(DetectConfig config, std::vector<int> subset);

struct TauRecord {
  int tau{0};
  bool ok{true};
  double r_lin{0.0};
  double r_scan_norm{0.0};
  int p_star{0};
  std::vector<int> subset;  // 0-based, sorted
  std::string note;
};

struct SolverDiagnostics {
  long long cg_iterations{0};
  int cg_solves{0};
  int max_cg_iterations{0};
  double max_rel_residual{0.0};
};

struct FitSummary {
  int iterations{0};
  double grad_inf_norm{0.0};
  bool performed{false};
};

struct DetectionReport {
  int n{0};
  int d{0};
  int d_active{0};
  int max_cardinality{0};
  double alpha_l{0.0};
  double alpha_s{0.0};
  Method method{Method::kCg};
  int tau_lo{0};
  int tau_hi{0};
  std::vector<int> restrict_to;

  std::vector<TauRecord> per_tau;
  std::vector<int> skipped_taus;

  double r_lin{0.0};
  int tau_hat_lin{0};
  double r_scan{0.0};  // already normalized by the per-p thresholds
  int tau_hat_scan{0};
  int scan_p{0};
  std::vector<int> scan_subset;

  int psi_lin{0};
  int psi_scan{0};
  int psi_auto{0};

  calib::ThresholdSet thresholds;
  bool bootstrap{false};
  double bootstrap_h_lin{std::numeric_limits<double>::quiet_NaN()};
  double bootstrap_scan_quantile{std::numeric_limits<double>::quiet_NaN()};

  Eigen::VectorXd theta_hat;
  FitSummary fit;
  SolverDiagnostics solver;
  double wall_seconds{0.0};
};

// Low-level operations. Each records its own evaluation context; the
// auto_test sweep amortizes that work across tau.

/// S_{s:t}(theta_hat); tail scores use the subtraction identity internally.
Eigen::VectorXd segment_score(const ModelProgram& program, const Eigen::VectorXd& theta_hat,
                              const ObservationSequence& data, int s, int t);

/// Matrix-free observed information of a segment.
InformationOperator segment_information(const ModelProgram& program,
                                        const Eigen::VectorXd& theta_hat,
                                        const ObservationSequence& data, int s, int t);

/// Partial observed information at tau: apply(v) = I_tail v - I_tail
/// solve(I_full, I_tail v), the inner solve by CG.
InformationOperator partial_information(const ModelProgram& program,
                                        const Eigen::VectorXd& theta_hat,
                                        const ObservationSequence& data, int tau,
                                        double cg_tol = 1e-7, int cg_max_iter = 0);

/// Dense Schur-complement partial information, for diagnostics and oracles.
Eigen::MatrixXd partial_information_dense(const ModelProgram& program,
                                          const Eigen::VectorXd& theta_hat,
                                          const ObservationSequence& data, int tau);

/// Generalized score statistic R_n(tau).
double linear_stat(const ModelProgram& program, const Eigen::VectorXd& theta_hat,
                   const ObservationSequence& data, int tau, Method method);

/// Diagonal importance v_i(tau); components with a nonpositive diagonal are
/// excluded (set to -infinity).
Eigen::VectorXd diag_importance(const ModelProgram& program, const Eigen::VectorXd& theta_hat,
                                const ObservationSequence& data, int tau, Method method);

/// Truncated statistic R_n(tau, T); under Method::kCg the normalizer is the
/// split form [I_head]_TT^{-1} + [I_tail]_TT^{-1}.
double truncated_stat(const ModelProgram& program, const Eigen::VectorXd& theta_hat,
                      const ObservationSequence& data, int tau, const std::vector<int>& subset,
                      Method method);

struct ScanResult {
  double r_scan{0.0};  // normalized
  int tau_hat{0};
  int p{0};
  std::vector<int> subset;
};

/// Scan statistic over the default tau range with supplied per-p thresholds.
ScanResult scan_stat(const ModelProgram& program, const Eigen::VectorXd& theta_hat,
                     const ObservationSequence& data, int max_cardinality,
                     const std::vector<double>& thresholds, Method method);

/// The full auto-test sweep: fits the MLE (unless provided), computes the
/// linear and scan statistics over the tau range, applies Bonferroni (or
/// bootstrap) calibration and assembles the report.
DetectionReport auto_test(const ModelProgram& program, const ObservationSequence& data,
                          const DetectConfig& config);

}  // namespace scorewatch::detect

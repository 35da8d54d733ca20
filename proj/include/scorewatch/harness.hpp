#pragma once

// Experiment harness: synthetic scenario generators with planted parameter
// changes, power curves, null-distribution checks, the direct-vs-CG runtime
// benchmark, and the ARMA heterogeneity study.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scorewatch/detect.hpp"
#include "scorewatch/models.hpp"

namespace scorewatch::harness {

/// A model family that scenarios draw concrete instances from per repetition.
struct ScenarioModel {
  std::string kind;  // linear | mlp | arma | hmm | topic
  int d{21};         // linear dimension
  int r{6};          // mlp input dim, or arma AR order
  int q{0};          // arma MA order
  int states{3};     // hmm / topic N
  int vocab{6};      // topic M
  double sigma{1.0}; // linear/mlp noise std; arma noise defaults to 0.1
  double root_lo{1.5};
  double root_hi{3.0};

  static ScenarioModel from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
};

/// One concrete model instance with its pre-change parameters.
struct ModelDraw {
  std::string kind;
  std::shared_ptr<ModelProgram> program;
  Eigen::VectorXd theta0;
  std::optional<models::ArmaSpec> arma;  // present for arma draws
};

ModelDraw draw_model(const ScenarioModel& family, Rng& rng);

/// Pre/post parameter pair: adds delta to the first p components, with the
/// family-specific rules for HMM (shift mass off the (1,1) entry) and ARMA
/// (shift the construction roots and re-extract the AR coefficients).
std::pair<Eigen::VectorXd, Eigen::VectorXd> plant_change(const ModelDraw& draw, int p,
                                                         double delta);

/// Simulates a scenario sample with the changepoint planted at tau.
ObservationSequence simulate(const ModelDraw& draw, const Eigen::VectorXd& theta0,
                             const Eigen::VectorXd& theta1, int tau, int n, Rng& rng);

struct ScenarioConfig {
  std::string name{"scenario"};
  ScenarioModel model;
  int n{400};
  int tau{0};  // 0 resolves to n/2
  int p{1};
  std::vector<double> delta_grid{0.0};
  int reps{200};
  std::uint64_t seed{1};
  detect::DetectConfig test;

  // Optional full-size overrides applied by the --full-size flag.
  std::optional<int> full_n;
  std::optional<int> full_d;
  std::optional<int> full_reps;

  static ScenarioConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
  void apply_full_size();
};

struct DeltaRow {
  double delta{0.0};
  int reps_done{0};
  int failures{0};
  double lin_rate{0.0};
  double scan_rate{0.0};
  double auto_rate{0.0};
  double lin_se{0.0};
  double scan_se{0.0};
  double auto_se{0.0};
};

struct PowerCurve {
  std::string config_hash;
  nlohmann::json config_echo;
  std::vector<DeltaRow> rows;
  bool partial{false};

  nlohmann::json to_json() const;
  std::string to_csv() const;  // header row + one line per delta
};

/// Rejection frequencies over the delta grid; per-rep results are cached in
/// $SCOREWATCH_CACHE (keyed by config hash) when that variable is set.
PowerCurve power_curve(const ScenarioConfig& config, int jobs = 0);

struct NullCheckOptions {
  int n{500};
  int tau{0};  // 0 resolves to n/2
  int reps{500};
  std::uint64_t seed{7};
  int jobs{0};
  Eigen::VectorXd drift;        // local alternative h (theta1 = theta0 + h/sqrt(n))
  Eigen::VectorXd fixed_delta;  // fixed alternative offset
  Eigen::MatrixXd i0;           // limiting information, for the noncentrality report
};

struct KsReport {
  int reps{0};
  int failures{0};
  double ks{0.0};
  double mean{0.0};
  double mean_over_n{0.0};
  double noncentrality{0.0};  // lambda (1-lambda) h' I0 h when drift and i0 given
  int dof{0};
};

/// Empirical distribution of R_n(tau) at a fixed tau against its chi-squared
/// limit; optional drift/fixed-alternative variants.
KsReport null_distribution_check(const ScenarioModel& family, const NullCheckOptions& options);

struct BenchmarkCell {
  std::string model;
  int n{0};
  int d{0};
  double direct_mean_s{0.0};
  double direct_se_s{0.0};
  double cg_mean_s{0.0};
  double cg_se_s{0.0};
  double cg_iterations_mean{0.0};
  double method_rel_gap{0.0};  // ||x_direct - x_cg|| / ||x_direct||
  int reps{0};
};

/// Wall-clock comparison of the dense-information solve against the
/// matrix-free CG solve of I_{1:n} x = z. For mlp the d-grid entries are the
/// input dimensions r.
std::vector<BenchmarkCell> runtime_benchmark(const std::string& model_kind,
                                             const std::vector<int>& n_grid,
                                             const std::vector<int>& d_grid, int reps,
                                             std::uint64_t seed);

std::string benchmark_to_csv(const std::vector<BenchmarkCell>& cells,
                             const std::string& config_hash);
nlohmann::json benchmark_to_json(const std::vector<BenchmarkCell>& cells,
                                 const std::string& config_hash);

struct HeterogeneityReport {
  int r{0};
  int q{0};
  int n{0};
  int reps{0};
  int failures{0};
  double fa_lin_unrestricted{0.0};
  double fa_scan_unrestricted{0.0};
  double fa_auto_unrestricted{0.0};
  double fa_lin_restricted{0.0};
  double fa_scan_restricted{0.0};
  double fa_auto_restricted{0.0};
  double median_condition{0.0};      // partial information at mid-sweep
  double scan_ar_selection_rate{0.0};  // fraction of scan picks that are pure AR
};

/// Null false-alarm comparison of unrestricted vs AR-restricted tests on a
/// random-root ARMA(r, q) family, with a conditioning diagnostic.
HeterogeneityReport arma_heterogeneity_study(int r, int q, int n, int reps, std::uint64_t seed,
                                             const detect::DetectConfig& base, int jobs = 0);

}  // namespace scorewatch::harness

#pragma once

// The model zoo: Gaussian linear model, small MLP regression, conditional
// ARMA, hidden Markov model with Gaussian emissions (normalized forward
// recursion), and the Brown-structured text topic model.
//
// Parameter conventions (natural coordinates):
//   linear  theta = (intercept, slopes...), d = covariates + 1
//   mlp     theta = (A1 row-major by hidden unit, b1, A2, b2), d = r*m + 2m + 1
//   arma    theta = (phi_1..phi_r, varphi_1..varphi_q)
//   hmm     theta = transition entries, rows stacked, first N-1 columns only;
//           the last column of each row is the implied remainder
//   topic   theta = free transition entries (as hmm) followed by the free
//           emission entries of each state's word block (all but the last)

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scorewatch/program.hpp"

namespace scorewatch::models {

struct ArmaSpec {
  int r{0};
  int q{0};
  Eigen::VectorXd phi;     // AR coefficients (theta0)
  Eigen::VectorXd varphi;  // MA coefficients (theta0)
  double sigma{0.1};
  // Construction roots (the lambda values with |lambda| > 1), kept when the
  // spec was built from roots so that changes can be planted on them.
  Eigen::VectorXd ar_roots;
  Eigen::VectorXd ma_roots;

  void validate() const;
  Eigen::VectorXd theta0() const;
  static ArmaSpec from_roots(const Eigen::VectorXd& ar_lambda, const Eigen::VectorXd& ma_lambda,
                             double sigma);
};

struct HmmSpec {
  int num_states{0};             // N
  Eigen::MatrixXd transition;    // N x N row-stochastic (theta0)
  Eigen::VectorXd emission_means;
  Eigen::VectorXd emission_stds;
  Eigen::VectorXd initial;       // nu

  void validate() const;
  int dim() const { return num_states == 1 ? 1 : num_states * (num_states - 1); }
  Eigen::VectorXd theta0() const;  // free entries (first N-1 columns, row-major)
  /// Gaussian emissions with mean k and std 0.01 + 0.09 k/(N-1), uniform nu.
  static HmmSpec standard(int num_states);
};

struct TopicModelSpec {
  int num_states{0};            // N
  int vocab{0};                 // M
  std::vector<int> state_map;   // word -> state, size M, values in [0, N)
  Eigen::MatrixXd transition;   // N x N (theta0)
  Eigen::VectorXd emission;     // g(x | state_map[x]), size M; per-state blocks sum to 1

  void validate() const;
  int dim() const;
  Eigen::VectorXd theta0() const;
  std::vector<std::vector<int>> state_words() const;  // words per state, in word order
};

std::unique_ptr<ModelProgram> linear_model(int d, double sigma = 1.0);
std::unique_ptr<ModelProgram> mlp_model(int r, double sigma = 1.0);
std::unique_ptr<ModelProgram> arma_loglik(const ArmaSpec& spec);
std::unique_ptr<ModelProgram> hmm_loglik(const HmmSpec& spec);
std::unique_ptr<ModelProgram> topic_model_loglik(const TopicModelSpec& spec);

int mlp_dim(int r);

/// Round-trips a model through its JSON document (fields "kind", "dim",
/// "params", "known_prefix").
std::unique_ptr<ModelProgram> model_from_json(const nlohmann::json& doc);

// Polynomial helpers shared with the experiment harness. The AR recursion
// X_t = sum phi_i X_{t-i} + ... has characteristic polynomial
// x^r - phi_1 x^{r-1} - ... - phi_r; stationarity means its roots lie inside
// the unit circle.
Eigen::VectorXd ar_coefficients_from_roots(const Eigen::VectorXd& lambda);
Eigen::VectorXcd characteristic_roots(const Eigen::VectorXd& coeffs);

double log_normal_density(double y, double mean, double std_dev);

}  // namespace scorewatch::models

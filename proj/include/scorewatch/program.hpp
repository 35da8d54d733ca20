#pragma once

// Model-program interface: a probabilistic loss mapping (theta, data segment)
// to a conditional log-likelihood recorded on an autodiff tape, plus the
// one-shot differential operators (value, score, information-vector product,
// dense observed information).

#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scorewatch/errors.hpp"
#include "scorewatch/rng.hpp"
#include "scorewatch/tape.hpp"

#include "../../vendor/json.hpp"

namespace scorewatch {

/// A point in parameter space with optional component labels.
struct ParameterVector {
  Eigen::VectorXd values;
  std::vector<std::string> labels;

  ParameterVector() = default;
  explicit ParameterVector(Eigen::VectorXd v) : values(std::move(v)) {}
  int dim() const { return static_cast<int>(values.size()); }
};

/// Ordered observations W_1..W_n, 1-based. The first `prefix_len` entries are
/// known/conditioned-on and carry no likelihood terms. Segment views are
/// (s, t) index pairs; no data is copied.
struct ObservationSequence {
  Eigen::VectorXd values;
  Eigen::MatrixXd covariates;  // n x c, or 0 x 0 when the model has none
  int prefix_len{0};

  int n() const { return static_cast<int>(values.size()); }
  bool has_covariates() const { return covariates.size() > 0; }
};

class ModelProgram {
 public:
  virtual ~ModelProgram() = default;

  virtual int dim() const = 0;
  virtual std::string kind() const = 0;

  /// Required known-prefix length (0 for i.i.d.-style models).
  virtual int known_prefix() const { return 0; }

  /// Covariate columns the data must provide; -1 means no covariates.
  virtual int covariate_dim() const { return -1; }

  virtual std::vector<std::string> labels() const;

  /// True when theta lies in the open admissible domain.
  virtual bool in_domain(const Eigen::VectorXd& theta) const;

  /// True when the likelihood terms are per-observation and self-contained,
  /// enabling the recursive score/information accumulation.
  virtual bool independent() const { return false; }

  /// Groups of parameter indices constrained to open sub-simplices (each
  /// group lists the free entries of one probability row). Used by the
  /// logit-reparameterized fitting path.
  virtual std::vector<std::vector<int>> simplex_groups() const { return {}; }

  virtual Eigen::VectorXd init_guess(const ObservationSequence& data) const;

  /// Records the conditional log-likelihood of segment [s, t] given the
  /// supplied parameter variables. Positions without likelihood terms must be
  /// skipped via builder.skip_term().
  virtual void record_terms(ad::TapeBuilder& builder, std::span<const ad::Var> theta,
                            const ObservationSequence& data, int s, int t) const = 0;

  /// Records a tape for segment [s, t]; tape structure depends only on data.
  ad::Tape record(const ObservationSequence& data, int s, int t) const;

  /// Simulates a length-n sequence with parameters theta0 up to and including
  /// position tau and theta1 after; tau >= n yields a pure theta0 sample.
  virtual ObservationSequence simulate(const Eigen::VectorXd& theta0,
                                       const Eigen::VectorXd& theta1, int tau, int n,
                                       Rng& rng) const = 0;

  virtual nlohmann::json to_json() const = 0;

 protected:
  void check_segment(const ObservationSequence& data, int s, int t) const;
  void check_data(const ObservationSequence& data) const;
};

// One-shot differential operators. Each call records a fresh tape; the
// detection engine reuses tapes and workspaces instead.

/// Conditional log-likelihood of segment [s, t] at theta.
double evaluate(const ModelProgram& program, const Eigen::VectorXd& theta,
                const ObservationSequence& data, int s, int t);

/// Score S_{s:t}(theta) via one reverse sweep.
Eigen::VectorXd gradient(const ModelProgram& program, const Eigen::VectorXd& theta,
                         const ObservationSequence& data, int s, int t);

/// Observed-information-vector product I_{s:t}(theta) v = -(Hessian) v,
/// computed matrix-free by forward-over-reverse.
Eigen::VectorXd hvp(const ModelProgram& program, const Eigen::VectorXd& theta,
                    const ObservationSequence& data, int s, int t, const Eigen::VectorXd& v);

/// Dense observed information assembled from dim() tangent sweeps.
/// Throws SizeError when dim() exceeds the cap, NumericError when the
/// symmetry defect exceeds 1e-8 relative.
Eigen::MatrixXd full_hessian(const ModelProgram& program, const Eigen::VectorXd& theta,
                             const ObservationSequence& data, int s, int t, int dim_cap = 4096);

}  // namespace scorewatch

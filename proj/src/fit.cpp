#include "scorewatch/fit.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Dense>

namespace scorewatch {

namespace reparam {

Eigen::VectorXd to_logits(const Eigen::VectorXd& theta,
                          const std::vector<std::vector<int>>& groups) {
  Eigen::VectorXd u = theta;
  for (const auto& group : groups) {
    double rest = 1.0;
    for (int idx : group) rest -= theta[idx];
    if (!(rest > 0.0)) throw DomainError("simplex group outside the open simplex");
    for (int idx : group) {
      if (!(theta[idx] > 0.0)) throw DomainError("simplex group outside the open simplex");
      u[idx] = std::log(theta[idx] / rest);
    }
  }
  return u;
}

Eigen::VectorXd to_natural(const Eigen::VectorXd& logits,
                           const std::vector<std::vector<int>>& groups) {
  Eigen::VectorXd theta = logits;
  for (const auto& group : groups) {
    double denom = 1.0;
    for (int idx : group) denom += std::exp(logits[idx]);
    for (int idx : group) theta[idx] = std::exp(logits[idx]) / denom;
  }
  return theta;
}

}  // namespace reparam

namespace {

// Wraps a simplex-constrained program so the optimizer sees an open domain.
// theta_j = exp(u_j) / (1 + sum_group exp(u)) within each group.
class LogitProgram final : public ModelProgram {
 public:
  explicit LogitProgram(const ModelProgram& base) : base_(base), groups_(base.simplex_groups()) {}

  int dim() const override { return base_.dim(); }
  std::string kind() const override { return base_.kind() + "+logit"; }
  int known_prefix() const override { return base_.known_prefix(); }
  int covariate_dim() const override { return base_.covariate_dim(); }

  bool in_domain(const Eigen::VectorXd& u) const override {
    if (u.size() != dim() || !u.allFinite()) return false;
    return u.cwiseAbs().maxCoeff() < 300.0;  // keeps exp() well away from overflow
  }

  void record_terms(ad::TapeBuilder& b, std::span<const ad::Var> u,
                    const ObservationSequence& data, int s, int t) const override {
    std::vector<ad::Var> theta(u.begin(), u.end());
    for (const auto& group : groups_) {
      std::vector<ad::Var> ex;
      ex.reserve(group.size());
      ad::Var denom = b.constant(1.0);
      for (int idx : group) {
        ex.push_back(exp(u[static_cast<std::size_t>(idx)]));
        denom = denom + ex.back();
      }
      for (std::size_t j = 0; j < group.size(); ++j) {
        theta[static_cast<std::size_t>(group[j])] = ex[j] / denom;
      }
    }
    base_.record_terms(b, theta, data, s, t);
  }

  ObservationSequence simulate(const Eigen::VectorXd&, const Eigen::VectorXd&, int, int,
                               Rng&) const override {
    throw Error("logit wrapper does not simulate");
  }

  nlohmann::json to_json() const override { return base_.to_json(); }

 private:
  const ModelProgram& base_;
  std::vector<std::vector<int>> groups_;
};

struct Objective {
  // Minimizes f(x) = -loglik(x) over the recorded full-sample tape.
  const ModelProgram& program;
  ad::Tape tape;
  ad::Workspace ws;

  Objective(const ModelProgram& p, const ObservationSequence& data) : program(p) {
    tape = p.record(data, 1, data.n());
    ws.bind(tape);
  }

  bool eval(const Eigen::VectorXd& x, double& f) {
    if (!program.in_domain(x)) return false;
    try {
      ws.forward(x);
    } catch (const DegeneracyError&) {
      return false;
    }
    const double ll = ws.value(tape.root());
    if (!std::isfinite(ll)) return false;
    f = -ll;
    return true;
  }

  void grad(Eigen::VectorXd& g) {
    // Valid immediately after a successful eval at the same point.
    Eigen::VectorXd score(program.dim());
    ws.gradient(tape.root(), score);
    g = -score;
  }
};

}  // namespace

FitResult fit_mle(const ModelProgram& program, const ObservationSequence& data,
                  const Eigen::VectorXd& init, const FitOptions& options) {
  const auto groups = program.simplex_groups();
  const bool reparametrized = !groups.empty();
  const LogitProgram wrapper_storage(program);
  const ModelProgram& target = reparametrized ? static_cast<const ModelProgram&>(wrapper_storage)
                                              : program;

  Eigen::VectorXd natural_init = init.size() > 0 ? init : program.init_guess(data);
  if (!program.in_domain(natural_init)) {
    throw DomainError("fit_mle initial point outside the model domain");
  }
  Eigen::VectorXd x = reparametrized ? reparam::to_logits(natural_init, groups) : natural_init;

  const int d = program.dim();
  Objective obj(target, data);

  double f = 0.0;
  if (!obj.eval(x, f)) throw DomainError("fit_mle objective undefined at the initial point");
  Eigen::VectorXd g(d);
  obj.grad(g);

  Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(d, d);
  bool scaled = false;

  const auto natural_of = [&](const Eigen::VectorXd& u) {
    return reparametrized ? reparam::to_natural(u, groups) : u;
  };
  // Convergence is judged on the score in natural coordinates. For the logit
  // path, S_theta = J^{-1} S_u with J = diag(theta_g) - theta_g theta_g^T per
  // group, and J^{-1} = diag(1/theta_j) + ones/rest by Sherman-Morrison.
  const auto natural_grad_norm = [&](const Eigen::VectorXd& u) {
    if (!reparametrized) return g.lpNorm<Eigen::Infinity>();
    const Eigen::VectorXd theta = natural_of(u);
    Eigen::VectorXd score = -g;  // S_u
    for (const auto& group : groups) {
      double rest = 1.0;
      double dot = 0.0;
      for (int idx : group) rest -= theta[idx];
      for (int idx : group) dot += score[idx];
      for (int idx : group) score[idx] = score[idx] / theta[idx] + dot / rest;
    }
    return score.lpNorm<Eigen::Infinity>();
  };

  int it = 0;
  double score_norm = natural_grad_norm(x);
  for (; it < options.max_iter && score_norm > options.tol; ++it) {
    Eigen::VectorXd p = -(h_inv * g);
    if (p.dot(g) >= 0.0) {
      h_inv.setIdentity();
      p = -g;
    }
    // Backtracking Armijo line search; out-of-domain trial points just shrink.
    // The acceptance margin tolerates objective-level rounding noise so the
    // quasi-Newton polish continues once |f| differences hit machine epsilon
    // (the AD gradient stays accurate there).
    const double gp = g.dot(p);
    const double noise = 16.0 * std::numeric_limits<double>::epsilon() * (std::abs(f) + 1.0);
    double step = 1.0;
    double f_new = f;
    Eigen::VectorXd x_new = x;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * p;
      double f_try;
      if (obj.eval(x_new, f_try) && f_try <= f + 1e-4 * step * gp + noise) {
        f_new = f_try;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;

    Eigen::VectorXd g_new(d);
    obj.grad(g_new);
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        h_inv *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::VectorXd hy = h_inv * y;
      // BFGS inverse update.
      h_inv.noalias() -= rho * (hy * s.transpose() + s * hy.transpose());
      h_inv.noalias() += rho * rho * (y.dot(hy) + sy) * (s * s.transpose());
    }
    x = x_new;
    f = f_new;
    g = g_new;
    score_norm = natural_grad_norm(x);
  }

  FitResult result;
  result.theta = natural_of(x);
  result.iterations = it;
  result.grad_inf_norm = score_norm;
  result.converged = score_norm <= options.tol;
  result.log_likelihood = -f;
  if (!result.converged && options.throw_on_failure) {
    throw ConvergenceError("fit_mle did not reach tolerance " + std::to_string(options.tol) +
                               " after " + std::to_string(it) + " iterations",
                           result.theta, it, score_norm);
  }
  return result;
}

}  // namespace scorewatch

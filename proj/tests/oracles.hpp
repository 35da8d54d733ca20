#pragma once

// Test-only oracles, independent of the implementation paths they check:
// central finite differences of tape evaluations, brute-force HMM path sums,
// dense linear algebra references, and numerical quadrature.

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "scorewatch/models.hpp"
#include "scorewatch/program.hpp"
#include "scorewatch/rng.hpp"

namespace oracles {

using scorewatch::ModelProgram;
using scorewatch::ObservationSequence;

// Central finite differences of the evaluate path, step 1e-6 * (1 + |theta_i|).
inline Eigen::VectorXd fd_gradient(const ModelProgram& program, const Eigen::VectorXd& theta,
                                   const ObservationSequence& data, int s, int t) {
  const int d = program.dim();
  Eigen::VectorXd g(d);
  for (int i = 0; i < d; ++i) {
    const double h = 1e-6 * (1.0 + std::abs(theta[i]));
    Eigen::VectorXd up = theta;
    Eigen::VectorXd dn = theta;
    up[i] += h;
    dn[i] -= h;
    g[i] = (scorewatch::evaluate(program, up, data, s, t) -
            scorewatch::evaluate(program, dn, data, s, t)) /
           (2.0 * h);
  }
  return g;
}

// Second central difference of a 1-d function.
inline double fd_second(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
}

// Brute-force HMM log-likelihood: log p(y_{1:n} | y_0) by path enumeration,
// with Gaussian emissions. Observations include the known prefix at index 0.
inline double hmm_path_sum(const scorewatch::models::HmmSpec& spec,
                           const Eigen::VectorXd& values) {
  const int num_states = spec.num_states;
  const auto n_total = static_cast<int>(values.size());
  const auto emission = [&](int state, double y) {
    return std::exp(
        scorewatch::models::log_normal_density(y, spec.emission_means[state],
                                               spec.emission_stds[state]));
  };
  // p(y_{0:n}) over all state paths.
  double joint = 0.0;
  double prefix_only = 0.0;
  const std::function<void(int, int, double)> walk = [&](int pos, int state, double weight) {
    const double w = weight * emission(state, values[pos]);
    if (pos == n_total - 1) {
      joint += w;
      return;
    }
    for (int next = 0; next < num_states; ++next) {
      walk(pos + 1, next, w * spec.transition(state, next));
    }
  };
  for (int s0 = 0; s0 < num_states; ++s0) {
    prefix_only += spec.initial[s0] * emission(s0, values[0]);
    walk(0, s0, spec.initial[s0]);
  }
  return std::log(joint) - std::log(prefix_only);
}

// Pure AR residual: eps_t = x_t - sum_i phi_i x_{t-i}, t = r+1..n.
inline double ar_loglik(const Eigen::VectorXd& phi, double sigma, const Eigen::VectorXd& x) {
  const auto r = static_cast<int>(phi.size());
  double acc = 0.0;
  for (int t = r + 1; t <= static_cast<int>(x.size()); ++t) {
    double eps = x[t - 1];
    for (int i = 1; i <= r; ++i) eps -= phi[i - 1] * x[t - 1 - i];
    acc += -0.5 * eps * eps / (sigma * sigma);
  }
  return acc;
}

// Adaptive Simpson quadrature.
inline double simpson(const std::function<double(double)>& f, double a, double b, double fa,
                      double fb, double fm, double eps, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) < 15.0 * eps) {
    return left + right + (left + right - whole) / 15.0;
  }
  return simpson(f, a, m, fa, fm, flm, 0.5 * eps, depth - 1) +
         simpson(f, m, b, fm, fb, frm, 0.5 * eps, depth - 1);
}

inline double integrate(const std::function<double(double)>& f, double a, double b,
                        double eps = 1e-12) {
  const double fa = f(a);
  const double fb = f(b);
  const double fm = f(0.5 * (a + b));
  return simpson(f, a, b, fa, fb, fm, eps, 40);
}

inline double chi2_density(int dof, double x) {
  const double a = 0.5 * dof;
  return std::exp((a - 1.0) * std::log(x) - 0.5 * x - std::lgamma(a) - a * std::log(2.0));
}

// Random SPD matrix with eigenvalues in [lo, hi].
inline Eigen::MatrixXd random_spd(int d, scorewatch::Rng& rng, double lo = 0.5, double hi = 4.0) {
  Eigen::MatrixXd m(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
  }
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  const Eigen::MatrixXd q = qr.householderQ();
  Eigen::VectorXd eigs(d);
  for (int i = 0; i < d; ++i) eigs[i] = rng.uniform(lo, hi);
  return q * eigs.asDiagonal() * q.transpose();
}

}  // namespace oracles

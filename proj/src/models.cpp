#include "scorewatch/models.hpp"

#include <cmath>
#include <deque>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

namespace scorewatch::models {

double log_normal_density(double y, double mean, double std_dev) {
  const double z = (y - mean) / std_dev;
  return -0.5 * std::log(2.0 * M_PI) - std::log(std_dev) - 0.5 * z * z;
}

Eigen::VectorXd ar_coefficients_from_roots(const Eigen::VectorXd& lambda) {
  // Expand prod_i (x - 1/lambda_i) = x^r + a_{r-1} x^{r-1} + ... + a_0 and
  // read the recursion coefficients off as phi_i = -a_{r-i}.
  const int r = static_cast<int>(lambda.size());
  std::vector<double> poly{1.0};
  for (int i = 0; i < r; ++i) {
    const double mu = 1.0 / lambda[i];
    std::vector<double> next(poly.size() + 1, 0.0);
    for (std::size_t j = 0; j < poly.size(); ++j) {
      next[j] += poly[j];          // x * poly
      next[j + 1] -= mu * poly[j]; // -mu * poly
    }
    poly = std::move(next);
  }
  Eigen::VectorXd phi(r);
  for (int i = 1; i <= r; ++i) phi[i - 1] = -poly[static_cast<std::size_t>(i)];
  return phi;
}

Eigen::VectorXcd characteristic_roots(const Eigen::VectorXd& coeffs) {
  const int r = static_cast<int>(coeffs.size());
  if (r == 0) return Eigen::VectorXcd();
  if (r == 1) {
    Eigen::VectorXcd out(1);
    out[0] = coeffs[0];
    return out;
  }
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(r, r);
  companion.row(0) = coeffs.transpose();
  companion.block(1, 0, r - 1, r - 1).setIdentity();
  Eigen::EigenSolver<Eigen::MatrixXd> solver(companion, /*computeEigenvectors=*/false);
  return solver.eigenvalues();
}

// ---------------------------------------------------------------------------
// Linear model

namespace {

class LinearProgram final : public ModelProgram {
 public:
  LinearProgram(int d, double sigma) : d_(d), sigma_(sigma) {
    if (d < 1) throw DomainError("linear model needs d >= 1");
    if (!(sigma > 0.0)) throw DomainError("noise std must be positive");
  }

  int dim() const override { return d_; }
  std::string kind() const override { return "linear"; }
  int covariate_dim() const override { return d_ - 1; }
  bool independent() const override { return true; }

  void record_terms(ad::TapeBuilder& b, std::span<const ad::Var> theta,
                    const ObservationSequence& data, int s, int t) const override {
    const double log_const = -0.5 * std::log(2.0 * M_PI) - std::log(sigma_);
    const double half_prec = -0.5 / (sigma_ * sigma_);
    const ad::Var c0 = b.constant(log_const);
    const ad::Var cw = b.constant(half_prec);
    for (int pos = s; pos <= t; ++pos) {
      b.begin_term();
      ad::Var mean = theta[0];
      for (int j = 1; j < d_; ++j) {
        mean = mean + theta[static_cast<std::size_t>(j)] * b.constant(data.covariates(pos - 1, j - 1));
      }
      const ad::Var resid = b.constant(data.values[pos - 1]) - mean;
      b.end_term(c0 + cw * (resid * resid));
    }
  }

  ObservationSequence simulate(const Eigen::VectorXd& theta0, const Eigen::VectorXd& theta1,
                               int tau, int n, Rng& rng) const override {
    ObservationSequence out;
    out.values.resize(n);
    out.covariates.resize(n, d_ - 1);
    for (int k = 1; k <= n; ++k) {
      const Eigen::VectorXd& th = k <= tau ? theta0 : theta1;
      double mean = th[0];
      for (int j = 1; j < d_; ++j) {
        const double x = rng.normal();
        out.covariates(k - 1, j - 1) = x;
        mean += th[j] * x;
      }
      out.values[k - 1] = mean + sigma_ * rng.normal();
    }
    return out;
  }

  nlohmann::json to_json() const override {
    return {{"kind", "linear"},
            {"dim", d_},
            {"params", {{"sigma", sigma_}}},
            {"known_prefix", 0}};
  }

 private:
  int d_;
  double sigma_;
};

// ---------------------------------------------------------------------------
// Multilayer perceptron with one tanh hidden layer and quadratic loss

class MlpProgram final : public ModelProgram {
 public:
  MlpProgram(int r, double sigma) : r_(r), m_(r / 2), sigma_(sigma) {
    if (r < 2) throw DomainError("mlp model needs r >= 2");
    if (!(sigma > 0.0)) throw DomainError("noise std must be positive");
  }

  int dim() const override { return r_ * m_ + 2 * m_ + 1; }
  std::string kind() const override { return "mlp"; }
  int covariate_dim() const override { return r_; }
  bool independent() const override { return true; }

  void record_terms(ad::TapeBuilder& b, std::span<const ad::Var> theta,
                    const ObservationSequence& data, int s, int t) const override {
    const double log_const = -0.5 * std::log(2.0 * M_PI) - std::log(sigma_);
    const double half_prec = -0.5 / (sigma_ * sigma_);
    const ad::Var c0 = b.constant(log_const);
    const ad::Var cw = b.constant(half_prec);
    const int w1 = 0, bias1 = r_ * m_, w2 = r_ * m_ + m_, bias2 = r_ * m_ + 2 * m_;
    for (int pos = s; pos <= t; ++pos) {
      b.begin_term();
      std::vector<ad::Var> x;
      x.reserve(static_cast<std::size_t>(r_));
      for (int j = 0; j < r_; ++j) x.push_back(b.constant(data.covariates(pos - 1, j)));
      ad::Var yhat = theta[static_cast<std::size_t>(bias2)];
      for (int i = 0; i < m_; ++i) {
        ad::Var pre = theta[static_cast<std::size_t>(bias1 + i)];
        for (int j = 0; j < r_; ++j) {
          pre = pre + theta[static_cast<std::size_t>(w1 + i * r_ + j)] * x[static_cast<std::size_t>(j)];
        }
        yhat = yhat + theta[static_cast<std::size_t>(w2 + i)] * tanh(pre);
      }
      const ad::Var resid = b.constant(data.values[pos - 1]) - yhat;
      b.end_term(c0 + cw * (resid * resid));
    }
  }

  ObservationSequence simulate(const Eigen::VectorXd& theta0, const Eigen::VectorXd& theta1,
                               int tau, int n, Rng& rng) const override {
    ObservationSequence out;
    out.values.resize(n);
    out.covariates.resize(n, r_);
    const int w1 = 0, bias1 = r_ * m_, w2 = r_ * m_ + m_, bias2 = r_ * m_ + 2 * m_;
    for (int k = 1; k <= n; ++k) {
      const Eigen::VectorXd& th = k <= tau ? theta0 : theta1;
      Eigen::VectorXd x = rng.normal_vector(r_);
      out.covariates.row(k - 1) = x.transpose();
      double yhat = th[bias2];
      for (int i = 0; i < m_; ++i) {
        double pre = th[bias1 + i];
        for (int j = 0; j < r_; ++j) pre += th[w1 + i * r_ + j] * x[j];
        yhat += th[w2 + i] * std::tanh(pre);
      }
      out.values[k - 1] = yhat + sigma_ * rng.normal();
    }
    return out;
  }

  nlohmann::json to_json() const override {
    return {{"kind", "mlp"},
            {"dim", dim()},
            {"params", {{"r", r_}, {"sigma", sigma_}}},
            {"known_prefix", 0}};
  }

 private:
  int r_;
  int m_;
  double sigma_;
};

// ---------------------------------------------------------------------------
// Conditional ARMA likelihood via the residual recursion

class ArmaProgram final : public ModelProgram {
 public:
  explicit ArmaProgram(ArmaSpec spec) : spec_(std::move(spec)) {
    if (spec_.r < spec_.q) throw DomainError("arma requires r >= q");
    if (spec_.r < 1) throw DomainError("arma requires r >= 1");
    if (!(spec_.sigma > 0.0)) throw DomainError("noise std must be positive");
  }

  int dim() const override { return spec_.r + spec_.q; }
  std::string kind() const override { return "arma"; }
  int known_prefix() const override { return spec_.r; }

  std::vector<std::string> labels() const override {
    std::vector<std::string> out;
    for (int i = 1; i <= spec_.r; ++i) out.push_back("phi" + std::to_string(i));
    for (int j = 1; j <= spec_.q; ++j) out.push_back("varphi" + std::to_string(j));
    return out;
  }

  void record_terms(ad::TapeBuilder& b, std::span<const ad::Var> theta,
                    const ObservationSequence& data, int s, int t) const override {
    const int r = spec_.r;
    const int q = spec_.q;
    const ad::Var zero = b.constant(0.0);
    const ad::Var cw = b.constant(-0.5 / (spec_.sigma * spec_.sigma));
    // Presample residuals are zero: the conditional-likelihood convention.
    std::deque<ad::Var> eps_hist(static_cast<std::size_t>(q), zero);
    for (int pos = s; pos <= std::min(t, r); ++pos) b.skip_term();
    for (int pos = r + 1; pos <= t; ++pos) {
      const bool in_segment = pos >= s;
      if (in_segment) b.begin_term();
      ad::Var eps = b.constant(data.values[pos - 1]);
      for (int i = 1; i <= r; ++i) {
        eps = eps - theta[static_cast<std::size_t>(i - 1)] * b.constant(data.values[pos - 1 - i]);
      }
      for (int j = 1; j <= q; ++j) {
        eps = eps - theta[static_cast<std::size_t>(r + j - 1)] * eps_hist[static_cast<std::size_t>(j - 1)];
      }
      if (in_segment) {
        b.end_term(cw * (eps * eps));
      }
      if (q > 0) {
        eps_hist.push_front(eps);
        eps_hist.pop_back();
      }
    }
  }

  ObservationSequence simulate(const Eigen::VectorXd& theta0, const Eigen::VectorXd& theta1,
                               int tau, int n, Rng& rng) const override {
    const int r = spec_.r;
    const int q = spec_.q;
    const int burn = 300;
    ObservationSequence out;
    out.values.resize(n);
    out.prefix_len = r;
    std::deque<double> x_hist(static_cast<std::size_t>(r), 0.0);
    std::deque<double> e_hist(static_cast<std::size_t>(q), 0.0);
    for (int k = -burn + 1; k <= n; ++k) {
      const Eigen::VectorXd& th = k <= tau ? theta0 : theta1;
      const double e = spec_.sigma * rng.normal();
      double x = e;
      for (int i = 1; i <= r; ++i) x += th[i - 1] * x_hist[static_cast<std::size_t>(i - 1)];
      for (int j = 1; j <= q; ++j) x += th[r + j - 1] * e_hist[static_cast<std::size_t>(j - 1)];
      if (r > 0) {
        x_hist.push_front(x);
        x_hist.pop_back();
      }
      if (q > 0) {
        e_hist.push_front(e);
        e_hist.pop_back();
      }
      if (k >= 1) out.values[k - 1] = x;
    }
    return out;
  }

  nlohmann::json to_json() const override {
    nlohmann::json params{{"r", spec_.r},
                          {"q", spec_.q},
                          {"sigma", spec_.sigma},
                          {"phi", std::vector<double>(spec_.phi.begin(), spec_.phi.end())},
                          {"varphi", std::vector<double>(spec_.varphi.begin(), spec_.varphi.end())}};
    if (spec_.ar_roots.size() > 0) {
      params["ar_roots"] = std::vector<double>(spec_.ar_roots.begin(), spec_.ar_roots.end());
      params["ma_roots"] = std::vector<double>(spec_.ma_roots.begin(), spec_.ma_roots.end());
    }
    return {{"kind", "arma"}, {"dim", dim()}, {"params", params}, {"known_prefix", spec_.r}};
  }

 private:
  ArmaSpec spec_;
};

// ---------------------------------------------------------------------------
// Hidden Markov model, normalized forward recursion

class HmmProgram final : public ModelProgram {
 public:
  explicit HmmProgram(HmmSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  int dim() const override { return spec_.dim(); }
  std::string kind() const override { return "hmm"; }
  int known_prefix() const override { return 1; }

  std::vector<std::string> labels() const override {
    const int N = spec_.num_states;
    if (N == 1) return {"unused"};
    std::vector<std::string> out;
    for (int i = 1; i <= N; ++i) {
      for (int j = 1; j <= N - 1; ++j) {
        out.push_back("q" + std::to_string(i) + std::to_string(j));
      }
    }
    return out;
  }

  bool in_domain(const Eigen::VectorXd& theta) const override {
    if (!ModelProgram::in_domain(theta)) return false;
    const int N = spec_.num_states;
    if (N == 1) return true;
    for (int i = 0; i < N; ++i) {
      double row_sum = 0.0;
      for (int j = 0; j < N - 1; ++j) {
        const double v = theta[i * (N - 1) + j];
        if (!(v > 0.0)) return false;
        row_sum += v;
      }
      if (!(row_sum < 1.0)) return false;
    }
    return true;
  }

  std::vector<std::vector<int>> simplex_groups() const override {
    const int N = spec_.num_states;
    if (N == 1) return {};
    std::vector<std::vector<int>> groups;
    for (int i = 0; i < N; ++i) {
      std::vector<int> g;
      for (int j = 0; j < N - 1; ++j) g.push_back(i * (N - 1) + j);
      groups.push_back(std::move(g));
    }
    return groups;
  }

  Eigen::VectorXd init_guess(const ObservationSequence&) const override {
    const int N = spec_.num_states;
    if (N == 1) return Eigen::VectorXd::Zero(1);
    return Eigen::VectorXd::Constant(dim(), 1.0 / N);
  }

  void record_terms(ad::TapeBuilder& b, std::span<const ad::Var> theta,
                    const ObservationSequence& data, int s, int t) const override {
    const int N = spec_.num_states;
    // Transition rows: free entries plus the implied last column.
    std::vector<std::vector<ad::Var>> q(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
      auto& row = q[static_cast<std::size_t>(i)];
      if (N == 1) {
        row.push_back(b.constant(1.0));
        continue;
      }
      ad::Var row_sum = theta[static_cast<std::size_t>(i * (N - 1))];
      row.push_back(theta[static_cast<std::size_t>(i * (N - 1))]);
      for (int j = 1; j < N - 1; ++j) {
        row.push_back(theta[static_cast<std::size_t>(i * (N - 1) + j)]);
        row_sum = row_sum + theta[static_cast<std::size_t>(i * (N - 1) + j)];
      }
      row.push_back(1.0 - row_sum);
    }

    // phi_0 from the known first observation; these carry no theta dependence.
    std::vector<ad::Var> phi(static_cast<std::size_t>(N));
    {
      Eigen::VectorXd w(N);
      for (int x = 0; x < N; ++x) {
        w[x] = spec_.initial[x] *
               std::exp(log_normal_density(data.values[0], spec_.emission_means[x],
                                           spec_.emission_stds[x]));
      }
      const double c0 = w.sum();
      if (!(c0 > 0.0)) throw DegeneracyError("initial forward normalizer is zero", 1);
      for (int x = 0; x < N; ++x) phi[static_cast<std::size_t>(x)] = b.constant(w[x] / c0);
    }

    if (s == 1) b.skip_term();
    for (int pos = 2; pos <= t; ++pos) {
      const bool in_segment = pos >= s;
      if (in_segment) b.begin_term();
      const double y = data.values[pos - 1];
      std::vector<ad::Var> m(static_cast<std::size_t>(N));
      for (int x = 0; x < N; ++x) {
        const double g = std::exp(
            log_normal_density(y, spec_.emission_means[x], spec_.emission_stds[x]));
        ad::Var acc = phi[0] * q[0][static_cast<std::size_t>(x)];
        for (int xp = 1; xp < N; ++xp) {
          acc = acc + phi[static_cast<std::size_t>(xp)] * q[static_cast<std::size_t>(xp)][static_cast<std::size_t>(x)];
        }
        m[static_cast<std::size_t>(x)] = acc * b.constant(g);
      }
      ad::Var c = m[0];
      for (int x = 1; x < N; ++x) c = c + m[static_cast<std::size_t>(x)];
      b.guard_floor(c, 1e-300, pos);
      for (int x = 0; x < N; ++x) phi[static_cast<std::size_t>(x)] = m[static_cast<std::size_t>(x)] / c;
      if (in_segment) b.end_term(log(c));
    }
  }

  ObservationSequence simulate(const Eigen::VectorXd& theta0, const Eigen::VectorXd& theta1,
                               int tau, int n, Rng& rng) const override {
    const int N = spec_.num_states;
    const auto build_q = [&](const Eigen::VectorXd& th) {
      Eigen::MatrixXd Q(N, N);
      if (N == 1) {
        Q(0, 0) = 1.0;
        return Q;
      }
      for (int i = 0; i < N; ++i) {
        double row_sum = 0.0;
        for (int j = 0; j < N - 1; ++j) {
          Q(i, j) = th[i * (N - 1) + j];
          row_sum += Q(i, j);
        }
        Q(i, N - 1) = 1.0 - row_sum;
      }
      return Q;
    };
    const Eigen::MatrixXd q0 = build_q(theta0);
    const Eigen::MatrixXd q1 = build_q(theta1);
    ObservationSequence out;
    out.values.resize(n);
    out.prefix_len = 1;
    int state = draw_discrete(spec_.initial, rng);
    out.values[0] = spec_.emission_means[state] + spec_.emission_stds[state] * rng.normal();
    for (int k = 2; k <= n; ++k) {
      const Eigen::MatrixXd& Q = k <= tau ? q0 : q1;
      state = draw_discrete(Q.row(state).transpose(), rng);
      out.values[k - 1] = spec_.emission_means[state] + spec_.emission_stds[state] * rng.normal();
    }
    return out;
  }

  nlohmann::json to_json() const override {
    std::vector<std::vector<double>> trans;
    for (int i = 0; i < spec_.num_states; ++i) {
      trans.emplace_back(spec_.transition.row(i).begin(), spec_.transition.row(i).end());
    }
    return {{"kind", "hmm"},
            {"dim", dim()},
            {"params",
             {{"states", spec_.num_states},
              {"transition", trans},
              {"emission_means",
               std::vector<double>(spec_.emission_means.begin(), spec_.emission_means.end())},
              {"emission_stds",
               std::vector<double>(spec_.emission_stds.begin(), spec_.emission_stds.end())},
              {"initial", std::vector<double>(spec_.initial.begin(), spec_.initial.end())}}},
            {"known_prefix", 1}};
  }

 private:
  static int draw_discrete(const Eigen::VectorXd& probs, Rng& rng) {
    const double u = rng.uniform01();
    double acc = 0.0;
    for (int i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u <= acc) return i;
    }
    return static_cast<int>(probs.size()) - 1;
  }

  HmmSpec spec_;
};

// ---------------------------------------------------------------------------
// Brown-structured text topic model

class TopicProgram final : public ModelProgram {
 public:
  explicit TopicProgram(TopicModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    blocks_ = spec_.state_words();
  }

  int dim() const override { return spec_.dim(); }
  std::string kind() const override { return "topic"; }
  int known_prefix() const override { return 1; }

  bool in_domain(const Eigen::VectorXd& theta) const override {
    if (!ModelProgram::in_domain(theta)) return false;
    for (const auto& group : simplex_groups()) {
      double sum = 0.0;
      for (int idx : group) {
        if (!(theta[idx] > 0.0)) return false;
        sum += theta[idx];
      }
      if (!(sum < 1.0)) return false;
    }
    return true;
  }

  std::vector<std::vector<int>> simplex_groups() const override {
    const int N = spec_.num_states;
    std::vector<std::vector<int>> groups;
    int offset = 0;
    if (N > 1) {
      for (int i = 0; i < N; ++i) {
        std::vector<int> g;
        for (int j = 0; j < N - 1; ++j) g.push_back(offset + i * (N - 1) + j);
        groups.push_back(std::move(g));
      }
      offset += N * (N - 1);
    }
    for (const auto& block : blocks_) {
      const int m = static_cast<int>(block.size());
      if (m >= 2) {
        std::vector<int> g;
        for (int j = 0; j < m - 1; ++j) g.push_back(offset + j);
        groups.push_back(std::move(g));
      }
      offset += std::max(0, m - 1);
    }
    return groups;
  }

  Eigen::VectorXd init_guess(const ObservationSequence&) const override {
    const int N = spec_.num_states;
    Eigen::VectorXd theta(dim());
    int offset = 0;
    if (N > 1) {
      for (int i = 0; i < N * (N - 1); ++i) theta[offset + i] = 1.0 / N;
      offset += N * (N - 1);
    }
    for (const auto& block : blocks_) {
      const int m = static_cast<int>(block.size());
      for (int j = 0; j + 1 < m; ++j) theta[offset + j] = 1.0 / m;
      offset += std::max(0, m - 1);
    }
    return theta;
  }

  void record_terms(ad::TapeBuilder& b, std::span<const ad::Var> theta,
                    const ObservationSequence& data, int s, int t) const override {
    const int N = spec_.num_states;
    // Transition entries with the implied last column.
    std::vector<std::vector<ad::Var>> q(static_cast<std::size_t>(N));
    int offset = 0;
    for (int i = 0; i < N; ++i) {
      auto& row = q[static_cast<std::size_t>(i)];
      if (N == 1) {
        row.push_back(b.constant(1.0));
        continue;
      }
      ad::Var row_sum = theta[static_cast<std::size_t>(offset + i * (N - 1))];
      row.push_back(theta[static_cast<std::size_t>(offset + i * (N - 1))]);
      for (int j = 1; j < N - 1; ++j) {
        row.push_back(theta[static_cast<std::size_t>(offset + i * (N - 1) + j)]);
        row_sum = row_sum + theta[static_cast<std::size_t>(offset + i * (N - 1) + j)];
      }
      row.push_back(1.0 - row_sum);
    }
    if (N > 1) offset += N * (N - 1);
    // Per-word emission variables under the Brown structure.
    std::vector<ad::Var> g_of_word(static_cast<std::size_t>(spec_.vocab));
    for (const auto& block : blocks_) {
      const int m = static_cast<int>(block.size());
      if (m == 1) {
        g_of_word[static_cast<std::size_t>(block[0])] = b.constant(1.0);
        continue;
      }
      ad::Var block_sum = theta[static_cast<std::size_t>(offset)];
      g_of_word[static_cast<std::size_t>(block[0])] = theta[static_cast<std::size_t>(offset)];
      for (int j = 1; j + 1 <= m - 1; ++j) {
        g_of_word[static_cast<std::size_t>(block[j])] = theta[static_cast<std::size_t>(offset + j)];
        block_sum = block_sum + theta[static_cast<std::size_t>(offset + j)];
      }
      g_of_word[static_cast<std::size_t>(block[m - 1])] = 1.0 - block_sum;
      offset += m - 1;
    }

    const auto word_at = [&](int pos) {
      const auto w = static_cast<int>(data.values[pos - 1]);
      if (w < 0 || w >= spec_.vocab) {
        throw DomainError("word index " + std::to_string(w) + " outside the vocabulary");
      }
      return w;
    };

    if (s == 1) b.skip_term();
    for (int pos = std::max(s, 2); pos <= t; ++pos) {
      const int w_prev = word_at(pos - 1);
      const int w = word_at(pos);
      const int h_prev = spec_.state_map[static_cast<std::size_t>(w_prev)];
      const int h = spec_.state_map[static_cast<std::size_t>(w)];
      b.begin_term();
      b.end_term(log(q[static_cast<std::size_t>(h_prev)][static_cast<std::size_t>(h)]) +
                 log(g_of_word[static_cast<std::size_t>(w)]));
    }
  }

  ObservationSequence simulate(const Eigen::VectorXd& theta0, const Eigen::VectorXd& theta1,
                               int tau, int n, Rng& rng) const override {
    const int N = spec_.num_states;
    const auto unpack = [&](const Eigen::VectorXd& th) {
      Eigen::MatrixXd Q(N, N);
      int offset = 0;
      if (N == 1) {
        Q(0, 0) = 1.0;
      } else {
        for (int i = 0; i < N; ++i) {
          double row_sum = 0.0;
          for (int j = 0; j < N - 1; ++j) {
            Q(i, j) = th[offset + i * (N - 1) + j];
            row_sum += Q(i, j);
          }
          Q(i, N - 1) = 1.0 - row_sum;
        }
        offset += N * (N - 1);
      }
      std::vector<Eigen::VectorXd> g;
      for (const auto& block : blocks_) {
        const int m = static_cast<int>(block.size());
        Eigen::VectorXd probs(m);
        if (m == 1) {
          probs[0] = 1.0;
        } else {
          double acc = 0.0;
          for (int j = 0; j + 1 < m; ++j) {
            probs[j] = th[offset + j];
            acc += probs[j];
          }
          probs[m - 1] = 1.0 - acc;
          offset += m - 1;
        }
        g.push_back(std::move(probs));
      }
      return std::make_pair(Q, g);
    };
    const auto [q0, g0] = unpack(theta0);
    const auto [q1, g1] = unpack(theta1);
    ObservationSequence out;
    out.values.resize(n);
    out.prefix_len = 1;
    int state = rng.uniform_int(0, N - 1);
    const auto emit = [&](int h, const std::vector<Eigen::VectorXd>& g) {
      const auto& block = blocks_[static_cast<std::size_t>(h)];
      const double u = rng.uniform01();
      double acc = 0.0;
      for (std::size_t j = 0; j < block.size(); ++j) {
        acc += g[static_cast<std::size_t>(h)][static_cast<Eigen::Index>(j)];
        if (u <= acc) return block[j];
      }
      return block.back();
    };
    out.values[0] = emit(state, g0);
    for (int k = 2; k <= n; ++k) {
      const bool pre = k <= tau;
      const Eigen::MatrixXd& Q = pre ? q0 : q1;
      const double u = rng.uniform01();
      double acc = 0.0;
      int next = N - 1;
      for (int j = 0; j < N; ++j) {
        acc += Q(state, j);
        if (u <= acc) {
          next = j;
          break;
        }
      }
      state = next;
      out.values[k - 1] = emit(state, pre ? g0 : g1);
    }
    return out;
  }

  nlohmann::json to_json() const override {
    std::vector<std::vector<double>> trans;
    for (int i = 0; i < spec_.num_states; ++i) {
      trans.emplace_back(spec_.transition.row(i).begin(), spec_.transition.row(i).end());
    }
    return {{"kind", "topic"},
            {"dim", dim()},
            {"params",
             {{"states", spec_.num_states},
              {"vocab", spec_.vocab},
              {"state_map", spec_.state_map},
              {"transition", trans},
              {"emission", std::vector<double>(spec_.emission.begin(), spec_.emission.end())}}},
            {"known_prefix", 1}};
  }

 private:
  TopicModelSpec spec_;
  std::vector<std::vector<int>> blocks_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Spec validation and extraction

void ArmaSpec::validate() const {
  if (r < 1 || q < 0 || r < q) throw DomainError("arma orders must satisfy r >= q, r >= 1");
  if (phi.size() != r || varphi.size() != q) throw DomainError("arma coefficient sizes mismatch");
  if (!(sigma > 0.0)) throw DomainError("arma sigma must be positive");
  const Eigen::VectorXcd roots = characteristic_roots(phi);
  for (Eigen::Index i = 0; i < roots.size(); ++i) {
    if (std::abs(roots[i]) >= 1.0) {
      throw DomainError("arma AR polynomial is not stationary (root magnitude " +
                        std::to_string(std::abs(roots[i])) + ")");
    }
  }
}

Eigen::VectorXd ArmaSpec::theta0() const {
  Eigen::VectorXd out(r + q);
  out.head(r) = phi;
  out.tail(q) = varphi;
  return out;
}

ArmaSpec ArmaSpec::from_roots(const Eigen::VectorXd& ar_lambda, const Eigen::VectorXd& ma_lambda,
                              double sigma) {
  ArmaSpec spec;
  spec.r = static_cast<int>(ar_lambda.size());
  spec.q = static_cast<int>(ma_lambda.size());
  spec.phi = ar_coefficients_from_roots(ar_lambda);
  // The MA side takes the plain expansion coefficients (opposite sign map):
  // x^q + varphi_1 x^{q-1} + ... + varphi_q = prod(x - 1/lambda_i), so the
  // residual recursion inverts a filter whose roots lie inside the unit
  // circle. The AR-style sign would make the epsilon recursion explosive.
  spec.varphi = spec.q > 0 ? (-ar_coefficients_from_roots(ma_lambda)).eval() : Eigen::VectorXd(0);
  spec.sigma = sigma;
  spec.ar_roots = ar_lambda;
  spec.ma_roots = ma_lambda;
  spec.validate();
  return spec;
}

void HmmSpec::validate() const {
  const int N = num_states;
  if (N < 1) throw DomainError("hmm needs at least one state");
  if (transition.rows() != N || transition.cols() != N) throw DomainError("hmm transition shape");
  if (emission_means.size() != N || emission_stds.size() != N || initial.size() != N) {
    throw DomainError("hmm emission/initial sizes mismatch");
  }
  for (int i = 0; i < N; ++i) {
    if (!(emission_stds[i] > 0.0)) throw DomainError("hmm emission std must be positive");
    if (transition.row(i).minCoeff() < 0.0) throw DomainError("hmm transition entries negative");
    if (std::abs(transition.row(i).sum() - 1.0) > 1e-12) {
      throw DomainError("hmm transition row " + std::to_string(i + 1) + " does not sum to 1");
    }
  }
  if (initial.minCoeff() < 0.0 || std::abs(initial.sum() - 1.0) > 1e-12) {
    throw DomainError("hmm initial distribution invalid");
  }
}

Eigen::VectorXd HmmSpec::theta0() const {
  const int N = num_states;
  if (N == 1) return Eigen::VectorXd::Zero(1);
  Eigen::VectorXd out(N * (N - 1));
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N - 1; ++j) out[i * (N - 1) + j] = transition(i, j);
  }
  return out;
}

HmmSpec HmmSpec::standard(int num_states) {
  HmmSpec spec;
  spec.num_states = num_states;
  spec.transition = Eigen::MatrixXd::Constant(num_states, num_states, 1.0 / num_states);
  spec.emission_means.resize(num_states);
  spec.emission_stds.resize(num_states);
  for (int k = 0; k < num_states; ++k) {
    spec.emission_means[k] = k;
    spec.emission_stds[k] = num_states == 1 ? 0.05 : 0.01 + 0.09 * k / (num_states - 1);
  }
  spec.initial = Eigen::VectorXd::Constant(num_states, 1.0 / num_states);
  return spec;
}

void TopicModelSpec::validate() const {
  const int N = num_states;
  const int M = vocab;
  if (N < 1 || M < 2) throw DomainError("topic model needs N >= 1, M >= 2");
  if (static_cast<int>(state_map.size()) != M) throw DomainError("state_map size mismatch");
  if (transition.rows() != N || transition.cols() != N) throw DomainError("topic transition shape");
  if (emission.size() != M) throw DomainError("topic emission size mismatch");
  std::vector<double> block_sum(static_cast<std::size_t>(N), 0.0);
  std::vector<int> block_count(static_cast<std::size_t>(N), 0);
  for (int x = 0; x < M; ++x) {
    const int h = state_map[static_cast<std::size_t>(x)];
    if (h < 0 || h >= N) throw DomainError("state_map value out of range");
    if (emission[x] < 0.0) throw DomainError("topic emission entries must be nonnegative");
    block_sum[static_cast<std::size_t>(h)] += emission[x];
    ++block_count[static_cast<std::size_t>(h)];
  }
  for (int h = 0; h < N; ++h) {
    if (block_count[static_cast<std::size_t>(h)] == 0) {
      throw DomainError("topic state " + std::to_string(h + 1) + " owns no words");
    }
    if (std::abs(block_sum[static_cast<std::size_t>(h)] - 1.0) > 1e-12) {
      throw DomainError("topic emission block " + std::to_string(h + 1) + " does not sum to 1");
    }
  }
  for (int i = 0; i < N; ++i) {
    if (std::abs(transition.row(i).sum() - 1.0) > 1e-12 || transition.row(i).minCoeff() < 0.0) {
      throw DomainError("topic transition row " + std::to_string(i + 1) + " invalid");
    }
  }
  if (dim() < 1) throw DomainError("topic model has no free parameters");
}

int TopicModelSpec::dim() const {
  const int chain = num_states > 1 ? num_states * (num_states - 1) : 0;
  return chain + vocab - num_states;
}

std::vector<std::vector<int>> TopicModelSpec::state_words() const {
  std::vector<std::vector<int>> blocks(static_cast<std::size_t>(num_states));
  for (int x = 0; x < vocab; ++x) blocks[static_cast<std::size_t>(state_map[static_cast<std::size_t>(x)])].push_back(x);
  return blocks;
}

Eigen::VectorXd TopicModelSpec::theta0() const {
  Eigen::VectorXd out(dim());
  int offset = 0;
  if (num_states > 1) {
    for (int i = 0; i < num_states; ++i) {
      for (int j = 0; j < num_states - 1; ++j) out[offset + i * (num_states - 1) + j] = transition(i, j);
    }
    offset += num_states * (num_states - 1);
  }
  for (const auto& block : state_words()) {
    const int m = static_cast<int>(block.size());
    for (int j = 0; j + 1 < m; ++j) out[offset + j] = emission[block[static_cast<std::size_t>(j)]];
    offset += std::max(0, m - 1);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::unique_ptr<ModelProgram> linear_model(int d, double sigma) {
  return std::make_unique<LinearProgram>(d, sigma);
}

std::unique_ptr<ModelProgram> mlp_model(int r, double sigma) {
  return std::make_unique<MlpProgram>(r, sigma);
}

int mlp_dim(int r) {
  const int m = r / 2;
  return r * m + 2 * m + 1;
}

std::unique_ptr<ModelProgram> arma_loglik(const ArmaSpec& spec) {
  return std::make_unique<ArmaProgram>(spec);
}

std::unique_ptr<ModelProgram> hmm_loglik(const HmmSpec& spec) {
  return std::make_unique<HmmProgram>(spec);
}

std::unique_ptr<ModelProgram> topic_model_loglik(const TopicModelSpec& spec) {
  return std::make_unique<TopicProgram>(spec);
}

namespace {

Eigen::VectorXd to_vector(const nlohmann::json& arr) {
  Eigen::VectorXd out(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) out[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
  return out;
}

Eigen::MatrixXd to_matrix(const nlohmann::json& rows) {
  const auto nr = static_cast<Eigen::Index>(rows.size());
  if (nr == 0) return {};
  const auto nc = static_cast<Eigen::Index>(rows[0].size());
  Eigen::MatrixXd out(nr, nc);
  for (Eigen::Index i = 0; i < nr; ++i) {
    for (Eigen::Index j = 0; j < nc; ++j) out(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].get<double>();
  }
  return out;
}

}  // namespace

std::unique_ptr<ModelProgram> model_from_json(const nlohmann::json& doc) {
  if (!doc.contains("kind")) throw ConfigError("model document is missing 'kind'");
  const std::string kind = doc.at("kind").get<std::string>();
  const nlohmann::json params = doc.value("params", nlohmann::json::object());
  std::unique_ptr<ModelProgram> program;
  if (kind == "linear") {
    program = linear_model(doc.at("dim").get<int>(), params.value("sigma", 1.0));
  } else if (kind == "mlp") {
    program = mlp_model(params.at("r").get<int>(), params.value("sigma", 1.0));
  } else if (kind == "arma") {
    ArmaSpec spec;
    spec.r = params.at("r").get<int>();
    spec.q = params.at("q").get<int>();
    spec.sigma = params.value("sigma", 0.1);
    spec.phi = to_vector(params.at("phi"));
    spec.varphi = params.contains("varphi") ? to_vector(params.at("varphi")) : Eigen::VectorXd(0);
    if (params.contains("ar_roots")) {
      spec.ar_roots = to_vector(params.at("ar_roots"));
      spec.ma_roots = to_vector(params.at("ma_roots"));
    }
    spec.validate();
    program = arma_loglik(spec);
  } else if (kind == "hmm") {
    HmmSpec spec;
    spec.num_states = params.at("states").get<int>();
    spec.transition = to_matrix(params.at("transition"));
    spec.emission_means = to_vector(params.at("emission_means"));
    spec.emission_stds = to_vector(params.at("emission_stds"));
    spec.initial = to_vector(params.at("initial"));
    program = hmm_loglik(spec);
  } else if (kind == "topic") {
    TopicModelSpec spec;
    spec.num_states = params.at("states").get<int>();
    spec.vocab = params.at("vocab").get<int>();
    spec.state_map = params.at("state_map").get<std::vector<int>>();
    spec.transition = to_matrix(params.at("transition"));
    spec.emission = to_vector(params.at("emission"));
    program = topic_model_loglik(spec);
  } else {
    throw ConfigError("unknown model kind '" + kind + "'");
  }
  if (doc.contains("dim") && doc.at("dim").get<int>() != program->dim()) {
    throw ConfigError("model document dim " + std::to_string(doc.at("dim").get<int>()) +
                      " does not match constructed dimension " + std::to_string(program->dim()));
  }
  if (doc.contains("known_prefix") && doc.at("known_prefix").get<int>() != program->known_prefix()) {
    throw ConfigError("model document known_prefix mismatch");
  }
  return program;
}

}  // namespace scorewatch::models

#include "scorewatch/detect.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>

#include <Eigen/Dense>

#include "scorewatch/fit.hpp"
#include "scorewatch/parallel.hpp"

namespace scorewatch::detect {

namespace {

Eigen::VectorXd embed(const Eigen::VectorXd& sub, const std::vector<int>& active, int d) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(d);
  for (std::size_t i = 0; i < active.size(); ++i) out[active[i]] = sub[static_cast<Eigen::Index>(i)];
  return out;
}

Eigen::VectorXd extract(const Eigen::VectorXd& full, const std::vector<int>& active) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(active.size()));
  for (std::size_t i = 0; i < active.size(); ++i) out[static_cast<Eigen::Index>(i)] = full[active[i]];
  return out;
}

std::vector<int> all_components(int d) {
  std::vector<int> out(static_cast<std::size_t>(d));
  std::iota(out.begin(), out.end(), 0);
  return out;
}

// Evaluation state over the full-sample tape at a fixed theta. Information
// products carry the observed-information sign (negated Hessian).
class EvalContext {
 public:
  EvalContext(const ModelProgram& program, const ObservationSequence& data,
              const Eigen::VectorXd& theta)
      : program_(program),
        data_(data),
        theta_(theta),
        owned_tape_(std::make_shared<ad::Tape>(program.record(data, 1, data.n()))),
        tape_(owned_tape_.get()) {
    init();
  }

  // Shares an already-recorded tape (immutable) across threads.
  EvalContext(const ModelProgram& program, const ObservationSequence& data,
              const Eigen::VectorXd& theta, std::shared_ptr<const ad::Tape> tape)
      : program_(program), data_(data), theta_(theta), shared_tape_(std::move(tape)),
        tape_(shared_tape_.get()) {
    init();
  }

  const ModelProgram& program() const { return program_; }
  const ObservationSequence& data() const { return data_; }
  const Eigen::VectorXd& theta() const { return theta_; }
  const ad::Tape& tape() const { return *tape_; }
  ad::Workspace& workspace() { return ws_; }
  int dim() const { return program_.dim(); }
  int n() const { return data_.n(); }

  std::int32_t root_at(int pos) const {
    if (pos < tape_->seg_begin()) return -1;
    return tape_->prefix_root(std::min(pos, tape_->seg_end()));
  }

  Eigen::VectorXd score_prefix(int pos) {
    Eigen::VectorXd g(dim());
    ws_.gradient(root_at(pos), g);
    return g;
  }

  /// I_{1:pos} v.
  Eigen::VectorXd info_prefix(int pos, const Eigen::VectorXd& v) {
    const std::int32_t root = root_at(pos);
    Eigen::VectorXd out(dim());
    if (root < 0) {
      out.setZero();
      return out;
    }
    ws_.set_tangent(v, root + 1);
    ws_.grad_tangent(root, out);
    return -out;
  }

  /// I_{s:t} v via the prefix difference.
  Eigen::VectorXd info_range(int s, int t, const Eigen::VectorXd& v) {
    const std::int32_t root_t = root_at(t);
    const std::int32_t root_s = root_at(s - 1);
    Eigen::VectorXd out(dim());
    if (root_t < 0) {
      out.setZero();
      return out;
    }
    ws_.set_tangent(v, root_t + 1);
    ws_.grad_tangent(root_t, out);
    out = -out;
    if (root_s >= 0 && root_s != root_t) {
      Eigen::VectorXd head(dim());
      ws_.grad_tangent(root_s, head);
      out += head;  // subtracting -head
    } else if (root_s == root_t) {
      out.setZero();
    }
    return out;
  }

 private:
  void init() {
    ws_.bind(*tape_);
    if (!program_.in_domain(theta_)) {
      throw DomainError("theta outside the admissible domain of model '" + program_.kind() + "'");
    }
    ws_.forward(theta_);
    if (tape_->root() >= 0) ws_.checked_value(tape_->root());
  }

  const ModelProgram& program_;
  const ObservationSequence& data_;
  Eigen::VectorXd theta_;
  std::shared_ptr<const ad::Tape> owned_tape_;
  std::shared_ptr<const ad::Tape> shared_tape_;
  const ad::Tape* tape_;
  ad::Workspace ws_;
};

struct CgFailure {
  double residual;
};

// Per-tau evaluation over one EvalContext. Direct mode materializes the
// active information blocks (incrementally for independent-observation
// models); CG mode keeps the linear statistic matrix-free.
class TauEvaluator {
 public:
  TauEvaluator(EvalContext& ctx, Method method, std::vector<int> active, double cg_tol,
               int cg_max_iter, double ridge)
      : ctx_(ctx),
        method_(method),
        active_(std::move(active)),
        cg_tol_(cg_tol),
        ridge_(ridge) {
    da_ = static_cast<int>(active_.size());
    cg_max_iter_ = cg_max_iter > 0 ? cg_max_iter : 2 * da_;
    s_full_a_ = extract(ctx_.score_prefix(ctx_.n()), active_);
    incremental_ = ctx_.tape().terms_self_contained() && ctx_.program().independent();
    if (incremental_) {
      score_run_.setZero(ctx_.dim());
      info_run_.setZero(ctx_.dim(), ctx_.dim());
      pos_done_ = 0;
      term_g_.resize(ctx_.dim());
      term_h_.resize(ctx_.dim(), ctx_.dim());
    }
    if (method_ == Method::kDirect) {
      full_aa_ = dense_info_full();
      full_aa_.diagonal().array() += 2.0 * ridge_;
      full_llt_.compute(full_aa_);
      if (full_llt_.info() != Eigen::Success) {
        throw ConditioningError("full-sample information is not positive definite", 0.0);
      }
    }
  }

  /// Dense active block of the full-sample information. Keeps the incremental
  /// prefix state untouched so the ascending tau sweep stays O(n) overall.
  Eigen::MatrixXd dense_info_full() {
    if (incremental_) {
      Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(ctx_.dim(), ctx_.dim());
      for (int k = 1; k <= ctx_.n(); ++k) {
        ctx_.workspace().term_information(k, term_h_);
        sum += term_h_;
      }
      Eigen::MatrixXd out(da_, da_);
      for (int j = 0; j < da_; ++j) {
        for (int i = 0; i < da_; ++i) out(i, j) = sum(active_[i], active_[j]);
      }
      return out;
    }
    return dense_info_by_columns(ctx_.n());
  }

  /// Dense active block of I_{1:pos}.
  Eigen::MatrixXd dense_info_prefix(int pos) {
    if (incremental_) {
      advance(pos);
      Eigen::MatrixXd out(da_, da_);
      for (int j = 0; j < da_; ++j) {
        for (int i = 0; i < da_; ++i) out(i, j) = info_run_(active_[i], active_[j]);
      }
      return out;
    }
    return dense_info_by_columns(pos);
  }

  Eigen::MatrixXd dense_info_by_columns(int pos) {
    Eigen::MatrixXd out(da_, da_);
    Eigen::VectorXd basis = Eigen::VectorXd::Zero(ctx_.dim());
    for (int j = 0; j < da_; ++j) {
      basis[active_[j]] = 1.0;
      out.col(j) = extract(ctx_.info_prefix(pos, basis), active_);
      basis[active_[j]] = 0.0;
    }
    return out;
  }

  Eigen::VectorXd score_head(int pos) {
    if (incremental_) {
      advance(pos);
      return extract(score_run_, active_);
    }
    return extract(ctx_.score_prefix(pos), active_);
  }

  struct TauState {
    int tau{-1};
    Eigen::VectorXd s_tail;
    // Direct-mode blocks.
    Eigen::MatrixXd head;
    Eigen::MatrixXd tail;
    Eigen::MatrixXd schur;
    Eigen::LLT<Eigen::MatrixXd> schur_llt;
    bool have_blocks{false};
    bool have_schur{false};
  };

  void prepare(int tau, TauState& st) {
    if (tau < 1 || tau >= ctx_.n()) throw DomainError("tau must be in [1, n-1]");
    st.tau = tau;
    st.s_tail = s_full_a_ - score_head(tau);
    st.have_blocks = false;
    st.have_schur = false;
  }

  void ensure_blocks(TauState& st) {
    if (st.have_blocks) return;
    st.head = dense_info_prefix(st.tau);
    st.head.diagonal().array() += ridge_;
    if (full_aa_.size() == 0) {
      full_aa_ = dense_info_full();
      full_aa_.diagonal().array() += 2.0 * ridge_;
    }
    // The full block carries both segment ridges, so the difference keeps one.
    st.tail = full_aa_ - st.head;
    st.have_blocks = true;
  }

  void ensure_schur(TauState& st) {
    if (st.have_schur) return;
    ensure_blocks(st);
    // I_tail - I_tail I_full^{-1} I_tail through the Cholesky factor of I_full.
    const Eigen::MatrixXd w = full_llt_.matrixL().solve(st.tail);
    st.schur = st.tail - w.transpose() * w;
    st.schur_llt.compute(st.schur);
    if (st.schur_llt.info() != Eigen::Success) {
      throw ConditioningError("partial information is not positive definite at tau=" +
                                  std::to_string(st.tau),
                              0.0);
    }
    st.have_schur = true;
  }

  double linear(TauState& st) {
    if (method_ == Method::kDirect) {
      ensure_schur(st);
      const Eigen::VectorXd half = st.schur_llt.matrixL().solve(st.s_tail);
      return half.squaredNorm();
    }
    const double r1 = quad_via_cg(st, /*head=*/true);
    const double r2 = quad_via_cg(st, /*head=*/false);
    return std::max(0.0, r1 + r2);
  }

  Eigen::VectorXd importance(TauState& st) {
    ensure_blocks(st);
    Eigen::VectorXd v(da_);
    if (method_ == Method::kDirect) {
      ensure_schur(st);
      for (int i = 0; i < da_; ++i) {
        const double dii = st.schur(i, i);
        v[i] = dii > 0.0 ? st.s_tail[i] * st.s_tail[i] / dii
                         : -std::numeric_limits<double>::infinity();
      }
      return v;
    }
    for (int i = 0; i < da_; ++i) {
      const double hd = st.head(i, i);
      const double tl = st.tail(i, i);
      v[i] = (hd > 0.0 && tl > 0.0)
                 ? st.s_tail[i] * st.s_tail[i] * (1.0 / hd + 1.0 / tl)
                 : -std::numeric_limits<double>::infinity();
    }
    return v;
  }

  // R_n(tau, T) for T given as positions into the active set, sorted.
  double truncated(TauState& st, const std::vector<int>& positions) {
    const auto m = static_cast<int>(positions.size());
    Eigen::VectorXd s_t(m);
    for (int i = 0; i < m; ++i) s_t[i] = st.s_tail[positions[static_cast<std::size_t>(i)]];
    if (method_ == Method::kDirect) {
      ensure_schur(st);
      Eigen::MatrixXd block(m, m);
      for (int j = 0; j < m; ++j) {
        for (int i = 0; i < m; ++i) {
          block(i, j) = st.schur(positions[static_cast<std::size_t>(i)],
                                 positions[static_cast<std::size_t>(j)]);
        }
      }
      Eigen::LLT<Eigen::MatrixXd> llt(block);
      if (llt.info() != Eigen::Success) {
        throw ConditioningError("truncated normalizer is not positive definite", 0.0);
      }
      return llt.matrixL().solve(s_t).squaredNorm();
    }
    ensure_blocks(st);
    Eigen::MatrixXd head_block(m, m);
    Eigen::MatrixXd tail_block(m, m);
    for (int j = 0; j < m; ++j) {
      for (int i = 0; i < m; ++i) {
        head_block(i, j) = st.head(positions[static_cast<std::size_t>(i)],
                                   positions[static_cast<std::size_t>(j)]);
        tail_block(i, j) = st.tail(positions[static_cast<std::size_t>(i)],
                                   positions[static_cast<std::size_t>(j)]);
      }
    }
    Eigen::LLT<Eigen::MatrixXd> llt_h(head_block);
    Eigen::LLT<Eigen::MatrixXd> llt_t(tail_block);
    if (llt_h.info() != Eigen::Success || llt_t.info() != Eigen::Success) {
      throw ConditioningError("split normalizer block is not positive definite", 0.0);
    }
    return std::max(0.0, llt_h.matrixL().solve(s_t).squaredNorm() +
                             llt_t.matrixL().solve(s_t).squaredNorm());
  }

  SolverDiagnostics& diagnostics() { return diag_; }
  int active_dim() const { return da_; }
  const std::vector<int>& active() const { return active_; }

 private:
  void advance(int pos) {
    if (pos < pos_done_) {
      score_run_.setZero();
      info_run_.setZero();
      pos_done_ = 0;
    }
    for (int k = pos_done_ + 1; k <= pos; ++k) {
      ctx_.workspace().term_gradient(k, term_g_);
      score_run_ += term_g_;
      ctx_.workspace().term_information(k, term_h_);
      info_run_ += term_h_;
    }
    pos_done_ = pos;
  }

  double quad_via_cg(TauState& st, bool head) {
    const int tau = st.tau;
    const auto apply = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
      const Eigen::VectorXd v_full = embed(v, active_, ctx_.dim());
      Eigen::VectorXd out = head ? ctx_.info_prefix(tau, v_full)
                                 : ctx_.info_range(tau + 1, ctx_.n(), v_full);
      Eigen::VectorXd out_a = extract(out, active_);
      if (ridge_ > 0.0) out_a += ridge_ * v;
      return out_a;
    };
    InformationOperator op(da_, InformationOperator::Kind::kSegment, apply);
    const CgResult res = cg_solve(op, st.s_tail, cg_tol_, cg_max_iter_);
    diag_.cg_iterations += res.iterations;
    diag_.cg_solves += 1;
    diag_.max_cg_iterations = std::max(diag_.max_cg_iterations, res.iterations);
    diag_.max_rel_residual = std::max(diag_.max_rel_residual, res.rel_residual);
    return st.s_tail.dot(res.x);
  }

  EvalContext& ctx_;
  Method method_;
  std::vector<int> active_;
  double cg_tol_;
  int cg_max_iter_;
  double ridge_;
  int da_{0};
  Eigen::VectorXd s_full_a_;
  Eigen::MatrixXd full_aa_;
  Eigen::LLT<Eigen::MatrixXd> full_llt_;
  SolverDiagnostics diag_;

  bool incremental_{false};
  int pos_done_{0};
  Eigen::VectorXd score_run_;
  Eigen::MatrixXd info_run_;
  Eigen::VectorXd term_g_;
  Eigen::MatrixXd term_h_;
};

// Indices of the top-p entries of v, ties broken by index order.
std::vector<int> importance_order(const Eigen::VectorXd& v) {
  std::vector<int> order(static_cast<std::size_t>(v.size()));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    if (v[i] != v[j]) return v[i] > v[j];
    return i < j;
  });
  return order;
}

TauRecord evaluate_tau(TauEvaluator& eval, int tau, int max_cardinality,
                       const std::vector<double>& h_p, bool want_scan) {
  TauRecord rec;
  rec.tau = tau;
  TauEvaluator::TauState st;
  try {
    eval.prepare(tau, st);
    rec.r_lin = eval.linear(st);
    if (want_scan) {
      const Eigen::VectorXd v = eval.importance(st);
      const std::vector<int> order = importance_order(v);
      double best = 0.0;
      int best_p = 0;
      std::vector<int> best_subset;
      for (int p = 1; p <= max_cardinality; ++p) {
        const double threshold = h_p[static_cast<std::size_t>(p - 1)];
        if (!std::isfinite(threshold)) continue;
        if (!std::isfinite(v[order[static_cast<std::size_t>(p - 1)]])) break;  // exclusions
        std::vector<int> subset(order.begin(), order.begin() + p);
        std::sort(subset.begin(), subset.end());
        double value;
        try {
          value = eval.truncated(st, subset);
        } catch (const ConditioningError&) {
          continue;  // this (tau, p) block is unusable; others may stand
        }
        const double normalized = value / threshold;
        if (normalized > best) {
          best = normalized;
          best_p = p;
          best_subset = std::move(subset);
        }
      }
      rec.r_scan_norm = best;
      rec.p_star = best_p;
      // Map positions in the active set back to component indices.
      rec.subset.reserve(best_subset.size());
      for (int pos : best_subset) rec.subset.push_back(eval.active()[static_cast<std::size_t>(pos)]);
    }
  } catch (const ConditioningError& e) {
    rec.ok = false;
    rec.note = e.what();
  } catch (const Error& e) {
    rec.ok = false;
    rec.note = e.what();
  }
  return rec;
}

std::vector<int> resolve_active(const std::vector<int>& restrict_to, int d) {
  if (restrict_to.empty()) return all_components(d);
  std::vector<int> active = restrict_to;
  std::sort(active.begin(), active.end());
  active.erase(std::unique(active.begin(), active.end()), active.end());
  if (active.front() < 0 || active.back() >= d) {
    throw ConfigError("restricted component index out of range");
  }
  return active;
}

std::pair<int, int> resolve_tau_range(const DetectConfig& config, int n, int prefix_len) {
  int lo = config.tau_lo > 0 ? config.tau_lo
                             : static_cast<int>(std::ceil(config.tau_lo_frac * n));
  int hi = config.tau_hi > 0 ? config.tau_hi
                             : static_cast<int>(std::floor(config.tau_hi_frac * n));
  lo = std::max({lo, 1, prefix_len + 1});
  hi = std::min(hi, n - 1);
  if (lo > hi) throw ConfigError("empty tau range");
  return {lo, hi};
}

}  // namespace

CgResult cg_solve(const InformationOperator& op, const Eigen::VectorXd& b, double tol,
                  int max_iter) {
  if (!b.allFinite()) throw DomainError("cg_solve right-hand side must be finite");
  if (max_iter <= 0) max_iter = 2 * op.dim();
  CgResult res;
  res.x = Eigen::VectorXd::Zero(op.dim());
  const double b_norm = b.norm();
  if (b_norm == 0.0) return res;
  Eigen::VectorXd r = b;
  Eigen::VectorXd p = r;
  double rs = r.squaredNorm();
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::VectorXd q = op.apply(p);
    const double pq = p.dot(q);
    if (!(pq > 0.0)) {
      throw ConditioningError("cg_solve: operator is not positive definite along the search direction",
                              std::sqrt(rs) / b_norm);
    }
    const double alpha = rs / pq;
    res.x += alpha * p;
    r -= alpha * q;
    const double rs_new = r.squaredNorm();
    res.iterations = it;
    if (std::sqrt(rs_new) <= tol * b_norm) {
      res.rel_residual = std::sqrt(rs_new) / b_norm;
      return res;
    }
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  throw ConditioningError("cg_solve did not converge within " + std::to_string(max_iter) +
                              " iterations",
                          std::sqrt(rs) / b_norm);
}

DetectConfig restrict_components(DetectConfig config, std::vector<int> subset) {
  if (subset.empty()) throw ConfigError("restriction subset must be nonempty");
  config.restrict_to = std::move(subset);
  return config;
}

Eigen::VectorXd segment_score(const ModelProgram& program, const Eigen::VectorXd& theta_hat,
                              const ObservationSequence& data, int s, int t) {
  EvalContext ctx(program, data, theta_hat);
  if (s < 1 || t < s || t > data.n()) throw DomainError("segment out of range");
  return ctx.score_prefix(t) - ctx.score_prefix(s - 1);
}

InformationOperator segment_information(const ModelProgram& program,
                                        const Eigen::VectorXd& theta_hat,
                                        const ObservationSequence& data, int s, int t) {
  auto ctx = std::make_shared<EvalContext>(program, data, theta_hat);
  if (s < 1 || t < s || t > data.n()) throw DomainError("segment out of range");
  return InformationOperator(
      program.dim(), InformationOperator::Kind::kSegment,
      [ctx, s, t](const Eigen::VectorXd& v) { return ctx->info_range(s, t, v); });
}

InformationOperator partial_information(const ModelProgram& program,
                                        const Eigen::VectorXd& theta_hat,
                                        const ObservationSequence& data, int tau, double cg_tol,
                                        int cg_max_iter) {
  if (tau < 1 || tau > data.n() - 1) throw DomainError("tau out of range");
  auto ctx = std::make_shared<EvalContext>(program, data, theta_hat);
  const int d = program.dim();
  const int n = data.n();
  const int max_iter = cg_max_iter > 0 ? cg_max_iter : 2 * d;
  return InformationOperator(
      d, InformationOperator::Kind::kSchur,
      [ctx, tau, n, d, cg_tol, max_iter](const Eigen::VectorXd& v) {
        const Eigen::VectorXd tail_v = ctx->info_range(tau + 1, n, v);
        InformationOperator full(
            d, InformationOperator::Kind::kSegment,
            [&](const Eigen::VectorXd& u) { return ctx->info_prefix(n, u); });
        const CgResult inner = cg_solve(full, tail_v, cg_tol, max_iter);
        return (tail_v - ctx->info_range(tau + 1, n, inner.x)).eval();
      });
}

Eigen::MatrixXd partial_information_dense(const ModelProgram& program,
                                          const Eigen::VectorXd& theta_hat,
                                          const ObservationSequence& data, int tau) {
  EvalContext ctx(program, data, theta_hat);
  TauEvaluator eval(ctx, Method::kDirect, all_components(program.dim()), 1e-7, 0, 0.0);
  TauEvaluator::TauState st;
  eval.prepare(tau, st);
  eval.ensure_schur(st);
  return st.schur;
}

double linear_stat(const ModelProgram& program, const Eigen::VectorXd& theta_hat,
                   const ObservationSequence& data, int tau, Method method) {
  EvalContext ctx(program, data, theta_hat);
  TauEvaluator eval(ctx, method, all_components(program.dim()), 1e-7, 0, 0.0);
  TauEvaluator::TauState st;
  eval.prepare(tau, st);
  return eval.linear(st);
}

Eigen::VectorXd diag_importance(const ModelProgram& program, const Eigen::VectorXd& theta_hat,
                                const ObservationSequence& data, int tau, Method method) {
  EvalContext ctx(program, data, theta_hat);
  TauEvaluator eval(ctx, method, all_components(program.dim()), 1e-7, 0, 0.0);
  TauEvaluator::TauState st;
  eval.prepare(tau, st);
  return eval.importance(st);
}

double truncated_stat(const ModelProgram& program, const Eigen::VectorXd& theta_hat,
                      const ObservationSequence& data, int tau, const std::vector<int>& subset,
                      Method method) {
  if (subset.empty()) throw DomainError("truncated statistic needs a nonempty subset");
  std::vector<int> sorted = subset;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  if (sorted.front() < 0 || sorted.back() >= program.dim()) {
    throw DomainError("subset index out of range");
  }
  EvalContext ctx(program, data, theta_hat);
  TauEvaluator eval(ctx, method, all_components(program.dim()), 1e-7, 0, 0.0);
  TauEvaluator::TauState st;
  eval.prepare(tau, st);
  return eval.truncated(st, sorted);
}

ScanResult scan_stat(const ModelProgram& program, const Eigen::VectorXd& theta_hat,
                     const ObservationSequence& data, int max_cardinality,
                     const std::vector<double>& thresholds, Method method) {
  if (static_cast<int>(thresholds.size()) < max_cardinality) {
    throw ConfigError("scan_stat needs one threshold per cardinality");
  }
  EvalContext ctx(program, data, theta_hat);
  TauEvaluator eval(ctx, method, all_components(program.dim()), 1e-7, 0, 0.0);
  DetectConfig defaults;
  const auto [lo, hi] = resolve_tau_range(defaults, data.n(), data.prefix_len);
  ScanResult best;
  for (int tau = lo; tau <= hi; ++tau) {
    const TauRecord rec = evaluate_tau(eval, tau, max_cardinality, thresholds, true);
    if (rec.ok && rec.r_scan_norm > best.r_scan) {
      best.r_scan = rec.r_scan_norm;
      best.tau_hat = tau;
      best.p = rec.p_star;
      best.subset = rec.subset;
    }
  }
  return best;
}

DetectionReport auto_test(const ModelProgram& program, const ObservationSequence& data,
                          const DetectConfig& config) {
  const auto t_start = std::chrono::steady_clock::now();
  if (config.alpha_l < 0.0 || config.alpha_s < 0.0 || config.alpha() >= 1.0) {
    throw ConfigError("significance levels must be nonnegative with alpha_l + alpha_s < 1");
  }

  DetectionReport report;
  report.n = data.n();
  report.d = program.dim();
  report.alpha_l = config.alpha_l;
  report.alpha_s = config.alpha_s;
  report.method = config.method;

  const std::vector<int> active = resolve_active(config.restrict_to, program.dim());
  report.restrict_to = config.restrict_to.empty() ? std::vector<int>() : active;
  report.d_active = static_cast<int>(active.size());
  const int da = report.d_active;

  int max_card = config.max_cardinality;
  if (max_card <= 0) max_card = static_cast<int>(std::floor(std::sqrt(static_cast<double>(da))));
  max_card = std::clamp(max_card, 1, da);
  report.max_cardinality = max_card;

  // MLE.
  if (config.theta_hat.size() > 0) {
    report.theta_hat = config.theta_hat;
  } else {
    FitOptions fopt;
    fopt.tol = config.fit_tol;
    fopt.max_iter = config.fit_max_iter;
    const FitResult fit = fit_mle(program, data, config.fit_init, fopt);
    report.theta_hat = fit.theta;
    report.fit.iterations = fit.iterations;
    report.fit.grad_inf_norm = fit.grad_inf_norm;
    report.fit.performed = true;
  }

  report.thresholds = calib::ThresholdSet::bonferroni(da, data.n(), max_card, config.alpha_l,
                                                      config.alpha_s);
  const bool want_scan = config.alpha_s > 0.0;

  const auto [tau_lo, tau_hi] = resolve_tau_range(config, data.n(), data.prefix_len);
  report.tau_lo = tau_lo;
  report.tau_hi = tau_hi;
  const int tau_count = tau_hi - tau_lo + 1;

  // Record the tape once; workers share it with private workspaces.
  auto tape = std::make_shared<const ad::Tape>(program.record(data, 1, data.n()));
  const int jobs = std::min(resolve_jobs(config.jobs), tau_count);
  std::vector<std::vector<TauRecord>> chunks(static_cast<std::size_t>(std::max(jobs, 1)));
  std::vector<SolverDiagnostics> diags(static_cast<std::size_t>(std::max(jobs, 1)));

  parallel_chunks(tau_count, jobs, [&](int worker, int begin, int end) {
    EvalContext ctx(program, data, report.theta_hat, tape);
    TauEvaluator eval(ctx, config.method, active, config.cg_tol, config.cg_max_iter,
                      config.ridge);
    auto& out = chunks[static_cast<std::size_t>(worker)];
    out.reserve(static_cast<std::size_t>(end - begin));
    for (int idx = begin; idx < end; ++idx) {
      out.push_back(evaluate_tau(eval, tau_lo + idx, max_card, report.thresholds.h_p, want_scan));
    }
    diags[static_cast<std::size_t>(worker)] = eval.diagnostics();
  });

  report.per_tau.reserve(static_cast<std::size_t>(tau_count));
  for (const auto& chunk : chunks) {
    report.per_tau.insert(report.per_tau.end(), chunk.begin(), chunk.end());
  }
  for (const auto& d : diags) {
    report.solver.cg_iterations += d.cg_iterations;
    report.solver.cg_solves += d.cg_solves;
    report.solver.max_cg_iterations = std::max(report.solver.max_cg_iterations, d.max_cg_iterations);
    report.solver.max_rel_residual = std::max(report.solver.max_rel_residual, d.max_rel_residual);
  }

  // Maxima over the sweep; ties keep the smallest tau (records are ordered).
  bool first_ok = true;
  for (const TauRecord& rec : report.per_tau) {
    if (!rec.ok) {
      report.skipped_taus.push_back(rec.tau);
      continue;
    }
    if (first_ok || rec.r_lin > report.r_lin) {
      report.r_lin = rec.r_lin;
      report.tau_hat_lin = rec.tau;
    }
    if (want_scan && (first_ok || rec.r_scan_norm > report.r_scan)) {
      report.r_scan = rec.r_scan_norm;
      report.tau_hat_scan = rec.tau;
      report.scan_p = rec.p_star;
      report.scan_subset = rec.subset;
    }
    first_ok = false;
  }

  // Calibration: Bonferroni by default, parametric bootstrap when requested.
  double h_lin = report.thresholds.h_lin;
  double scan_cut = 1.0;
  if (config.bootstrap_replicates > 0) {
    report.bootstrap = true;
    DetectConfig sweep = config;
    sweep.bootstrap_replicates = 0;
    sweep.theta_hat.resize(0);
    sweep.fit_init = report.theta_hat;  // warm start per replicate
    calib::BootstrapOptions bopt;
    bopt.replicates = config.bootstrap_replicates;
    bopt.seed = config.bootstrap_seed;
    bopt.jobs = config.jobs;
    bopt.fit_tol = config.fit_tol;
    bopt.fit_max_iter = config.fit_max_iter;
    const auto stats = calib::bootstrap_statistics(program, data, report.theta_hat, sweep, bopt);
    std::vector<double> lin_vals;
    std::vector<double> scan_vals;
    lin_vals.reserve(stats.size());
    scan_vals.reserve(stats.size());
    for (const auto& [l, s] : stats) {
      lin_vals.push_back(l);
      scan_vals.push_back(s);
    }
    if (config.alpha_l > 0.0) {
      h_lin = calib::empirical_upper_quantile(lin_vals, config.alpha_l);
      report.bootstrap_h_lin = h_lin;
    }
    if (config.alpha_s > 0.0) {
      scan_cut = calib::empirical_upper_quantile(scan_vals, config.alpha_s);
      report.bootstrap_scan_quantile = scan_cut;
    }
  }

  report.psi_lin = report.r_lin > h_lin ? 1 : 0;
  report.psi_scan = want_scan && report.r_scan > scan_cut ? 1 : 0;
  report.psi_auto = std::max(report.psi_lin, report.psi_scan);

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

}  // namespace scorewatch::detect

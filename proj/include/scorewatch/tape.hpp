#pragma once

// Reverse-mode automatic differentiation over flat scalar tapes.
//
// A Tape is an immutable, topologically ordered list of primitive scalar
// operations.  Parameter leaves occupy node indices [0, dim).  Models record
// one tape per data segment; the tape structure depends only on the data, so
// the same tape is replayed for every parameter value.  All evaluation state
// (primal values, tangents, adjoints) lives in a Workspace, which makes
// concurrent sweeps over a shared tape safe as long as each thread owns its
// workspace.
//
// Hessian-vector products use forward-over-reverse: a tangent is pushed
// through the primal pass and then through the adjoint pass, which yields
// exact second derivatives at roughly the cost of two extra sweeps.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scorewatch/errors.hpp"

namespace scorewatch::ad {

// Closed primitive set. Models must compose their losses from these.
enum class Op : std::uint8_t {
  kParam,
  kConst,
  kAdd,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kPow,   // fixed real exponent in aux
  kTanh,
  kMax,   // ties route the subgradient to the left operand
  kSelect // select(c, a, b) = a if c > 0 else b; derivative w.r.t. c is 0
};

struct Node {
  Op op{Op::kConst};
  std::int32_t a{-1};
  std::int32_t b{-1};
  std::int32_t c{-1};  // third operand, Select only
  double aux{0.0};     // constant value (kConst) or exponent (kPow)
};

class TapeBuilder;

class Tape {
 public:
  Tape() = default;

  int dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  /// Index of the scalar root (log-likelihood of the whole segment), or -1
  /// when the segment contains no likelihood terms.
  std::int32_t root() const noexcept { return root_; }

  /// First and last 1-based data positions this tape covers.
  int seg_begin() const noexcept { return seg_begin_; }
  int seg_end() const noexcept { return seg_begin_ + static_cast<int>(prefix_roots_.size()) - 1; }

  /// Node holding the partial sum of terms from seg_begin() through position
  /// k, or -1 if no term exists up to k.
  std::int32_t prefix_root(int k) const { return prefix_roots_.at(idx(k)); }

  /// Per-position term root / block start (-1 when the position has no term).
  std::int32_t term_root(int k) const { return term_roots_.at(idx(k)); }
  std::int32_t term_start(int k) const { return term_starts_.at(idx(k)); }

  /// True when every term references only its own block, parameter leaves and
  /// the shared constant pool. Required by the per-term sweeps used for
  /// independent-observation models.
  bool terms_self_contained() const noexcept { return self_contained_; }

  struct Guard {
    std::int32_t node;
    double floor;
    std::int64_t tag;
  };
  std::span<const Guard> guards() const noexcept { return guards_; }

 private:
  friend class TapeBuilder;

  std::size_t idx(int k) const {
    return static_cast<std::size_t>(k - seg_begin_);
  }

  std::vector<Node> nodes_;
  int dim_{0};
  std::int32_t root_{-1};
  int seg_begin_{1};
  std::int32_t const_pool_end_{0};
  bool self_contained_{true};
  std::vector<std::int32_t> prefix_roots_;
  std::vector<std::int32_t> term_roots_;
  std::vector<std::int32_t> term_starts_;
  std::vector<Guard> guards_;
};

/// Lightweight handle to a tape node during recording.
class Var {
 public:
  Var() = default;
  std::int32_t index() const noexcept { return i_; }
  bool valid() const noexcept { return i_ >= 0; }

 private:
  friend class TapeBuilder;
  Var(std::int32_t i, TapeBuilder* b) : i_(i), b_(b) {}
  std::int32_t i_{-1};
  TapeBuilder* b_{nullptr};

  friend Var operator+(Var x, Var y);
  friend Var operator*(Var x, Var y);
  friend Var operator/(Var x, Var y);
  friend Var operator-(Var x);
  friend Var operator-(Var x, Var y);
  friend Var operator+(Var x, double y);
  friend Var operator+(double x, Var y);
  friend Var operator-(Var x, double y);
  friend Var operator-(double x, Var y);
  friend Var operator*(Var x, double y);
  friend Var operator*(double x, Var y);
  friend Var operator/(Var x, double y);
  friend Var operator/(double x, Var y);
  friend Var exp(Var x);
  friend Var log(Var x);
  friend Var pow(Var x, double k);
  friend Var tanh(Var x);
  friend Var max(Var x, Var y);
  friend Var select(Var c, Var x, Var y);
};

/// Records a Tape. Position bookkeeping: call `begin_term()` /
/// `end_term(value)` once per data position in order, or `skip_term()` for
/// positions that carry no likelihood term (e.g. a known prefix).
class TapeBuilder {
 public:
  explicit TapeBuilder(int dim, int seg_begin = 1);

  int dim() const noexcept { return dim_; }

  Var param(int i);
  Var constant(double v);

  void begin_term();
  void end_term(Var value);
  void skip_term();

  /// Registers a runtime floor check on `v`; replay fails with a
  /// DegeneracyError carrying `tag` if the primal falls to or below `floor`.
  void guard_floor(Var v, double floor, std::int64_t tag);

  Tape finish();

 private:
  friend class Var;
  friend Var operator+(Var x, Var y);
  friend Var operator*(Var x, Var y);
  friend Var operator/(Var x, Var y);
  friend Var operator-(Var x);
  friend Var exp(Var x);
  friend Var log(Var x);
  friend Var pow(Var x, double k);
  friend Var tanh(Var x);
  friend Var max(Var x, Var y);
  friend Var select(Var c, Var x, Var y);

  Var emit(Op op, std::int32_t a, std::int32_t b, std::int32_t c, double aux);
  void note_operand(std::int32_t operand);

  Tape tape_;
  int dim_{0};
  bool in_term_{false};
  std::int32_t term_start_{-1};
  bool term_clean_{true};
  bool finished_{false};
};

inline Var operator+(Var x, Var y) { return x.b_->emit(Op::kAdd, x.i_, y.i_, -1, 0.0); }
inline Var operator*(Var x, Var y) { return x.b_->emit(Op::kMul, x.i_, y.i_, -1, 0.0); }
inline Var operator/(Var x, Var y) { return x.b_->emit(Op::kDiv, x.i_, y.i_, -1, 0.0); }
inline Var operator-(Var x) { return x.b_->emit(Op::kNeg, x.i_, -1, -1, 0.0); }
inline Var operator-(Var x, Var y) { return x + (-y); }
inline Var operator+(Var x, double y) { return x + x.b_->constant(y); }
inline Var operator+(double x, Var y) { return y.b_->constant(x) + y; }
inline Var operator-(Var x, double y) { return x + x.b_->constant(-y); }
inline Var operator-(double x, Var y) { return y.b_->constant(x) + (-y); }
inline Var operator*(Var x, double y) { return x * x.b_->constant(y); }
inline Var operator*(double x, Var y) { return y.b_->constant(x) * y; }
inline Var operator/(Var x, double y) { return x / x.b_->constant(y); }
inline Var operator/(double x, Var y) { return y.b_->constant(x) / y; }
inline Var exp(Var x) { return x.b_->emit(Op::kExp, x.i_, -1, -1, 0.0); }
inline Var log(Var x) { return x.b_->emit(Op::kLog, x.i_, -1, -1, 0.0); }
inline Var pow(Var x, double k) { return x.b_->emit(Op::kPow, x.i_, -1, -1, k); }
inline Var tanh(Var x) { return x.b_->emit(Op::kTanh, x.i_, -1, -1, 0.0); }
inline Var max(Var x, Var y) { return x.b_->emit(Op::kMax, x.i_, y.i_, -1, 0.0); }
inline Var select(Var c, Var x, Var y) { return c.b_->emit(Op::kSelect, x.i_, y.i_, c.i_, 0.0); }

/// Per-evaluation buffers for sweeps over one tape. Not thread-safe; create
/// one workspace per thread.
class Workspace {
 public:
  Workspace() = default;
  explicit Workspace(const Tape& tape) { bind(tape); }

  void bind(const Tape& tape);
  const Tape* tape() const noexcept { return tape_; }

  /// Primal pass over the whole tape. Throws DomainError when theta has the
  /// wrong size, DegeneracyError when a guard trips.
  void forward(const Eigen::VectorXd& theta);

  double value(std::int32_t node) const { return node < 0 ? 0.0 : val_[static_cast<std::size_t>(node)]; }

  /// Checks that the value at `node` is finite; otherwise locates the first
  /// non-finite node and throws NumericError.
  double checked_value(std::int32_t node) const;

  /// Gradient of the scalar at `root` w.r.t. the parameter leaves.
  /// Adjoints are cached per root, so repeated Hessian-vector products
  /// against the same root only pay for the tangent sweeps.
  void gradient(std::int32_t root, Eigen::Ref<Eigen::VectorXd> g);

  /// Forward tangent pass in direction v over nodes [0, limit); limit < 0
  /// sweeps the whole tape.
  void set_tangent(const Eigen::VectorXd& v, std::int32_t limit = -1);

  /// d/de grad(root)(theta + e*v) for the direction set by set_tangent();
  /// i.e. the Hessian of the recorded scalar applied to v.
  void grad_tangent(std::int32_t root, Eigen::Ref<Eigen::VectorXd> hv);

  /// Gradient of the single term at data position k (self-contained tapes only).
  void term_gradient(int k, Eigen::Ref<Eigen::VectorXd> g);

  /// Hessian of the single term at position k, negated into an observed
  /// information contribution (self-contained tapes only).
  void term_information(int k, Eigen::Ref<Eigen::MatrixXd> info);

 private:
  const std::vector<double>& adjoint_for(std::int32_t root);

  const Tape* tape_{nullptr};
  std::vector<double> val_;
  std::vector<double> dot_;
  std::vector<double> adjdot_;
  struct AdjSlot {
    std::int32_t root{-2};
    std::vector<double> adj;
  };
  std::array<AdjSlot, 2> slots_;
  int next_slot_{0};
  bool have_primal_{false};
  std::int32_t tangent_limit_{0};
};

}  // namespace scorewatch::ad

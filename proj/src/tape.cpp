#include "scorewatch/tape.hpp"

#include <cmath>
#include <limits>

namespace scorewatch::ad {

TapeBuilder::TapeBuilder(int dim, int seg_begin) : dim_(dim) {
  if (dim < 1) throw DomainError("tape dimension must be positive");
  tape_.dim_ = dim;
  tape_.seg_begin_ = seg_begin;
  tape_.nodes_.reserve(static_cast<std::size_t>(dim) + 64);
  for (int i = 0; i < dim; ++i) {
    Node n;
    n.op = Op::kParam;
    n.a = i;
    tape_.nodes_.push_back(n);
  }
  tape_.const_pool_end_ = dim;
}

Var TapeBuilder::param(int i) {
  if (i < 0 || i >= dim_) throw DomainError("parameter index out of range");
  return Var(i, this);
}

Var TapeBuilder::constant(double v) {
  return emit(Op::kConst, -1, -1, -1, v);
}

void TapeBuilder::note_operand(std::int32_t operand) {
  // Operands must be in the current block, a parameter leaf, or the shared
  // constant pool; anything else marks the tape as having entangled terms.
  if (!in_term_ || operand < 0) return;
  if (operand >= term_start_) return;
  if (operand < dim_) return;
  if (operand < tape_.const_pool_end_) return;
  term_clean_ = false;
}

Var TapeBuilder::emit(Op op, std::int32_t a, std::int32_t b, std::int32_t c, double aux) {
  if (finished_) throw Error("tape builder already finished");
  note_operand(a);
  note_operand(b);
  note_operand(c);
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.c = c;
  n.aux = aux;
  tape_.nodes_.push_back(n);
  auto i = static_cast<std::int32_t>(tape_.nodes_.size() - 1);
  if (!in_term_ && op == Op::kConst && tape_.const_pool_end_ == i) {
    // Still in the leading constant-pool region.
    tape_.const_pool_end_ = i + 1;
  }
  return Var(i, this);
}

void TapeBuilder::begin_term() {
  if (in_term_) throw Error("begin_term without matching end_term");
  in_term_ = true;
  term_start_ = static_cast<std::int32_t>(tape_.nodes_.size());
  term_clean_ = true;
}

void TapeBuilder::end_term(Var value) {
  if (!in_term_) throw Error("end_term without begin_term");
  in_term_ = false;
  if (!value.valid()) throw Error("end_term requires a valid value");
  if (!term_clean_) tape_.self_contained_ = false;
  tape_.term_starts_.push_back(term_start_);
  tape_.term_roots_.push_back(value.index());
  // Chain the running segment sum so every prefix log-likelihood has a node.
  if (tape_.root_ < 0) {
    tape_.root_ = value.index();
  } else {
    Var prev(tape_.root_, this);
    tape_.root_ = (prev + value).index();
  }
  tape_.prefix_roots_.push_back(tape_.root_);
}

void TapeBuilder::skip_term() {
  if (in_term_) throw Error("skip_term inside a term");
  tape_.term_starts_.push_back(-1);
  tape_.term_roots_.push_back(-1);
  tape_.prefix_roots_.push_back(tape_.root_);
}

void TapeBuilder::guard_floor(Var v, double floor, std::int64_t tag) {
  tape_.guards_.push_back(Tape::Guard{v.index(), floor, tag});
}

Tape TapeBuilder::finish() {
  if (in_term_) throw Error("finish inside a term");
  finished_ = true;
  return std::move(tape_);
}

void Workspace::bind(const Tape& tape) {
  tape_ = &tape;
  val_.assign(tape.size(), 0.0);
  dot_.assign(tape.size(), 0.0);
  adjdot_.assign(tape.size(), 0.0);
  for (auto& s : slots_) {
    s.root = -2;
    s.adj.assign(tape.size(), 0.0);
  }
  have_primal_ = false;
  tangent_limit_ = 0;
}

void Workspace::forward(const Eigen::VectorXd& theta) {
  const Tape& t = *tape_;
  if (theta.size() != t.dim()) throw DomainError("theta dimension mismatch");
  const Node* nodes = t.nodes().data();
  const auto n = static_cast<std::int32_t>(t.size());
  double* v = val_.data();
  for (std::int32_t i = 0; i < n; ++i) {
    const Node& nd = nodes[i];
    switch (nd.op) {
      case Op::kParam: v[i] = theta[nd.a]; break;
      case Op::kConst: v[i] = nd.aux; break;
      case Op::kAdd: v[i] = v[nd.a] + v[nd.b]; break;
      case Op::kMul: v[i] = v[nd.a] * v[nd.b]; break;
      case Op::kDiv: v[i] = v[nd.a] / v[nd.b]; break;
      case Op::kNeg: v[i] = -v[nd.a]; break;
      case Op::kExp: v[i] = std::exp(v[nd.a]); break;
      case Op::kLog: v[i] = std::log(v[nd.a]); break;
      case Op::kPow: v[i] = std::pow(v[nd.a], nd.aux); break;
      case Op::kTanh: v[i] = std::tanh(v[nd.a]); break;
      case Op::kMax: v[i] = v[nd.a] >= v[nd.b] ? v[nd.a] : v[nd.b]; break;
      case Op::kSelect: v[i] = v[nd.c] > 0.0 ? v[nd.a] : v[nd.b]; break;
    }
  }
  for (const auto& g : t.guards()) {
    if (!(v[g.node] > g.floor)) {
      throw DegeneracyError("guarded value fell to its numeric floor", g.tag);
    }
  }
  have_primal_ = true;
  for (auto& s : slots_) s.root = -2;  // adjoints are stale for the new point
}

double Workspace::checked_value(std::int32_t node) const {
  double r = value(node);
  if (std::isfinite(r)) return r;
  const auto n = static_cast<std::int32_t>(tape_->size());
  for (std::int32_t i = 0; i < n; ++i) {
    if (!std::isfinite(val_[static_cast<std::size_t>(i)])) {
      throw NumericError("non-finite intermediate during tape replay", i);
    }
  }
  throw NumericError("non-finite tape output", node);
}

namespace {

// Reverse propagation of a single node's adjoint into its operands.
inline void push_adjoint(const Node& nd, std::int32_t i, const double* v, double* adj) {
  const double a = adj[i];
  if (a == 0.0) return;
  switch (nd.op) {
    case Op::kParam:
    case Op::kConst:
      break;
    case Op::kAdd:
      adj[nd.a] += a;
      adj[nd.b] += a;
      break;
    case Op::kMul:
      adj[nd.a] += a * v[nd.b];
      adj[nd.b] += a * v[nd.a];
      break;
    case Op::kDiv: {
      const double inv_b = 1.0 / v[nd.b];
      adj[nd.a] += a * inv_b;
      adj[nd.b] -= a * v[i] * inv_b;  // v[i] = a/b
      break;
    }
    case Op::kNeg:
      adj[nd.a] -= a;
      break;
    case Op::kExp:
      adj[nd.a] += a * v[i];
      break;
    case Op::kLog:
      adj[nd.a] += a / v[nd.a];
      break;
    case Op::kPow: {
      const double k = nd.aux;
      adj[nd.a] += a * k * std::pow(v[nd.a], k - 1.0);
      break;
    }
    case Op::kTanh:
      adj[nd.a] += a * (1.0 - v[i] * v[i]);
      break;
    case Op::kMax:
      adj[v[nd.a] >= v[nd.b] ? nd.a : nd.b] += a;
      break;
    case Op::kSelect:
      adj[v[nd.c] > 0.0 ? nd.a : nd.b] += a;
      break;
  }
}

// Tangent of one node's primal value given operand tangents.
inline double tangent_of(const Node& nd, std::int32_t i, const double* v, const double* dot) {
  switch (nd.op) {
    case Op::kParam:
    case Op::kConst:
      return 0.0;  // parameter tangents are preloaded by the caller
    case Op::kAdd: return dot[nd.a] + dot[nd.b];
    case Op::kMul: return dot[nd.a] * v[nd.b] + v[nd.a] * dot[nd.b];
    case Op::kDiv: return (dot[nd.a] - v[i] * dot[nd.b]) / v[nd.b];
    case Op::kNeg: return -dot[nd.a];
    case Op::kExp: return v[i] * dot[nd.a];
    case Op::kLog: return dot[nd.a] / v[nd.a];
    case Op::kPow: return nd.aux * std::pow(v[nd.a], nd.aux - 1.0) * dot[nd.a];
    case Op::kTanh: return (1.0 - v[i] * v[i]) * dot[nd.a];
    case Op::kMax: return v[nd.a] >= v[nd.b] ? dot[nd.a] : dot[nd.b];
    case Op::kSelect: return v[nd.c] > 0.0 ? dot[nd.a] : dot[nd.b];
  }
  return 0.0;
}

// Reverse propagation of adjoint tangents: d/de of the adjoint recursion.
// Reads the (cached) plain adjoints and the primal tangents.
inline void push_adjoint_tangent(const Node& nd, std::int32_t i, const double* v,
                                 const double* dot, const double* adj, double* adjdot) {
  const double a = adj[i];
  const double at = adjdot[i];
  if (a == 0.0 && at == 0.0) return;
  switch (nd.op) {
    case Op::kParam:
    case Op::kConst:
      break;
    case Op::kAdd:
      adjdot[nd.a] += at;
      adjdot[nd.b] += at;
      break;
    case Op::kMul:
      adjdot[nd.a] += at * v[nd.b] + a * dot[nd.b];
      adjdot[nd.b] += at * v[nd.a] + a * dot[nd.a];
      break;
    case Op::kDiv: {
      const double inv_b = 1.0 / v[nd.b];
      const double y = v[i];                              // a/b
      const double ydot = (dot[nd.a] - y * dot[nd.b]) * inv_b;
      // d(1/b) = -bdot/b^2 ; d(-y/b) = -(ydot*b - y*bdot)/b^2
      adjdot[nd.a] += at * inv_b - a * dot[nd.b] * inv_b * inv_b;
      adjdot[nd.b] += -at * y * inv_b - a * (ydot * inv_b - y * dot[nd.b] * inv_b * inv_b);
      break;
    }
    case Op::kNeg:
      adjdot[nd.a] -= at;
      break;
    case Op::kExp: {
      const double ydot = v[i] * dot[nd.a];
      adjdot[nd.a] += at * v[i] + a * ydot;
      break;
    }
    case Op::kLog: {
      const double inv_a = 1.0 / v[nd.a];
      adjdot[nd.a] += at * inv_a - a * dot[nd.a] * inv_a * inv_a;
      break;
    }
    case Op::kPow: {
      const double k = nd.aux;
      const double d1 = k * std::pow(v[nd.a], k - 1.0);
      const double d2 = k * (k - 1.0) * std::pow(v[nd.a], k - 2.0);
      adjdot[nd.a] += at * d1 + a * d2 * dot[nd.a];
      break;
    }
    case Op::kTanh: {
      const double y = v[i];
      const double ydot = (1.0 - y * y) * dot[nd.a];
      adjdot[nd.a] += at * (1.0 - y * y) - a * 2.0 * y * ydot;
      break;
    }
    case Op::kMax: {
      const std::int32_t sel = v[nd.a] >= v[nd.b] ? nd.a : nd.b;
      adjdot[sel] += at;
      break;
    }
    case Op::kSelect: {
      const std::int32_t sel = v[nd.c] > 0.0 ? nd.a : nd.b;
      adjdot[sel] += at;
      break;
    }
  }
}

}  // namespace

const std::vector<double>& Workspace::adjoint_for(std::int32_t root) {
  for (int s = 0; s < 2; ++s) {
    if (slots_[static_cast<std::size_t>(s)].root == root) {
      next_slot_ = 1 - s;  // keep the most recently used slot resident
      return slots_[static_cast<std::size_t>(s)].adj;
    }
  }
  AdjSlot& slot = slots_[static_cast<std::size_t>(next_slot_)];
  next_slot_ = 1 - next_slot_;
  double* adj = slot.adj.data();
  const std::int32_t clear_to = std::max<std::int32_t>(root + 1, tape_->dim());
  std::fill(adj, adj + clear_to, 0.0);
  adj[root] = 1.0;
  const Node* nodes = tape_->nodes().data();
  const double* v = val_.data();
  for (std::int32_t i = root; i >= 0; --i) {
    push_adjoint(nodes[i], i, v, adj);
  }
  slot.root = root;
  return slot.adj;
}

void Workspace::gradient(std::int32_t root, Eigen::Ref<Eigen::VectorXd> g) {
  if (!have_primal_) throw Error("gradient before forward pass");
  const int d = tape_->dim();
  if (root < 0) {
    g.setZero();
    return;
  }
  const std::vector<double>& adj = adjoint_for(root);
  for (int j = 0; j < d; ++j) g[j] = adj[static_cast<std::size_t>(j)];
}

void Workspace::set_tangent(const Eigen::VectorXd& v, std::int32_t limit) {
  if (!have_primal_) throw Error("set_tangent before forward pass");
  const Tape& t = *tape_;
  if (v.size() != t.dim()) throw DomainError("tangent dimension mismatch");
  const auto n = limit < 0 ? static_cast<std::int32_t>(t.size())
                           : std::min<std::int32_t>(limit, static_cast<std::int32_t>(t.size()));
  const Node* nodes = t.nodes().data();
  const double* val = val_.data();
  double* dot = dot_.data();
  const int d = t.dim();
  for (std::int32_t i = 0; i < n; ++i) {
    if (i < d) {
      dot[i] = v[i];
    } else {
      dot[i] = tangent_of(nodes[i], i, val, dot);
    }
  }
  tangent_limit_ = n;
}

void Workspace::grad_tangent(std::int32_t root, Eigen::Ref<Eigen::VectorXd> hv) {
  const int d = tape_->dim();
  if (root < 0) {
    hv.setZero();
    return;
  }
  if (root >= tangent_limit_) throw Error("grad_tangent beyond tangent sweep limit");
  const std::vector<double>& adjv = adjoint_for(root);
  const double* adj = adjv.data();
  double* adjdot = adjdot_.data();
  std::fill(adjdot, adjdot + std::max<std::int32_t>(root + 1, d), 0.0);
  const Node* nodes = tape_->nodes().data();
  const double* v = val_.data();
  const double* dot = dot_.data();
  for (std::int32_t i = root; i >= 0; --i) {
    push_adjoint_tangent(nodes[i], i, v, dot, adj, adjdot);
  }
  for (int j = 0; j < d; ++j) hv[j] = adjdot[static_cast<std::size_t>(j)];
}

void Workspace::term_gradient(int k, Eigen::Ref<Eigen::VectorXd> g) {
  const Tape& t = *tape_;
  if (!t.terms_self_contained()) throw Error("per-term sweep on an entangled tape");
  if (!have_primal_) throw Error("term_gradient before forward pass");
  g.setZero();
  const std::int32_t root = t.term_root(k);
  if (root < 0) return;
  const std::int32_t start = t.term_start(k);
  const int d = t.dim();
  // Use the adjdot buffer as block-local adjoint scratch.
  double* adj = adjdot_.data();
  std::fill(adj + start, adj + root + 1, 0.0);
  adj[root] = 1.0;
  const Node* nodes = t.nodes().data();
  const double* v = val_.data();
  for (std::int32_t i = root; i >= start; --i) {
    const Node& nd = nodes[i];
    const double a = adj[i];
    if (a == 0.0) continue;
    // In-block operands propagate; parameter leaves accumulate into g;
    // constant-pool references are dead ends.
    const auto sink = [&](std::int32_t o, double w) {
      if (o >= start) {
        adj[o] += w;
      } else if (o < d) {
        g[o] += w;
      }
    };
    switch (nd.op) {
      case Op::kParam:
      case Op::kConst:
        break;
      case Op::kAdd:
        sink(nd.a, a);
        sink(nd.b, a);
        break;
      case Op::kMul:
        sink(nd.a, a * v[nd.b]);
        sink(nd.b, a * v[nd.a]);
        break;
      case Op::kDiv: {
        const double inv_b = 1.0 / v[nd.b];
        sink(nd.a, a * inv_b);
        sink(nd.b, -a * v[i] * inv_b);
        break;
      }
      case Op::kNeg: sink(nd.a, -a); break;
      case Op::kExp: sink(nd.a, a * v[i]); break;
      case Op::kLog: sink(nd.a, a / v[nd.a]); break;
      case Op::kPow: sink(nd.a, a * nd.aux * std::pow(v[nd.a], nd.aux - 1.0)); break;
      case Op::kTanh: sink(nd.a, a * (1.0 - v[i] * v[i])); break;
      case Op::kMax: sink(v[nd.a] >= v[nd.b] ? nd.a : nd.b, a); break;
      case Op::kSelect: sink(v[nd.c] > 0.0 ? nd.a : nd.b, a); break;
    }
  }
}

void Workspace::term_information(int k, Eigen::Ref<Eigen::MatrixXd> info) {
  const Tape& t = *tape_;
  if (!t.terms_self_contained()) throw Error("per-term sweep on an entangled tape");
  if (!have_primal_) throw Error("term_information before forward pass");
  const int d = t.dim();
  info.setZero();
  const std::int32_t root = t.term_root(k);
  if (root < 0) return;
  const std::int32_t start = t.term_start(k);
  const Node* nodes = t.nodes().data();
  const double* v = val_.data();

  // Block-local plain adjoints, computed once per term.
  std::vector<double>& adjbuf = slots_[0].adj;  // reuse slot storage as scratch
  slots_[0].root = -2;
  slots_[1].root = -2;
  double* adj = adjbuf.data();
  std::fill(adj + start, adj + root + 1, 0.0);
  adj[root] = 1.0;
  for (std::int32_t i = root; i >= start; --i) {
    const Node& nd = nodes[i];
    const double a = adj[i];
    if (a == 0.0) continue;
    switch (nd.op) {
      case Op::kParam:
      case Op::kConst:
        break;
      case Op::kAdd:
        if (nd.a >= start) adj[nd.a] += a;
        if (nd.b >= start) adj[nd.b] += a;
        break;
      case Op::kMul:
        if (nd.a >= start) adj[nd.a] += a * v[nd.b];
        if (nd.b >= start) adj[nd.b] += a * v[nd.a];
        break;
      case Op::kDiv: {
        const double inv_b = 1.0 / v[nd.b];
        if (nd.a >= start) adj[nd.a] += a * inv_b;
        if (nd.b >= start) adj[nd.b] -= a * v[i] * inv_b;
        break;
      }
      case Op::kNeg:
        if (nd.a >= start) adj[nd.a] -= a;
        break;
      case Op::kExp:
        if (nd.a >= start) adj[nd.a] += a * v[i];
        break;
      case Op::kLog:
        if (nd.a >= start) adj[nd.a] += a / v[nd.a];
        break;
      case Op::kPow:
        if (nd.a >= start) adj[nd.a] += a * nd.aux * std::pow(v[nd.a], nd.aux - 1.0);
        break;
      case Op::kTanh:
        if (nd.a >= start) adj[nd.a] += a * (1.0 - v[i] * v[i]);
        break;
      case Op::kMax: {
        const std::int32_t sel = v[nd.a] >= v[nd.b] ? nd.a : nd.b;
        if (sel >= start) adj[sel] += a;
        break;
      }
      case Op::kSelect: {
        const std::int32_t sel = v[nd.c] > 0.0 ? nd.a : nd.b;
        if (sel >= start) adj[sel] += a;
        break;
      }
    }
  }

  // One forward+reverse tangent sweep per basis direction, block-local.
  double* dot = dot_.data();
  double* adjdot = adjdot_.data();
  std::fill(dot, dot + d, 0.0);
  const auto dot_at = [&](std::int32_t o) -> double {
    if (o >= start) return dot[o];
    if (o < d) return dot[o];
    return 0.0;  // constant pool
  };
  for (int col = 0; col < d; ++col) {
    dot[col] = 1.0;
    for (std::int32_t i = start; i <= root; ++i) {
      const Node& nd = nodes[i];
      switch (nd.op) {
        case Op::kParam: dot[i] = nd.a == col ? 1.0 : 0.0; break;
        case Op::kConst: dot[i] = 0.0; break;
        case Op::kAdd: dot[i] = dot_at(nd.a) + dot_at(nd.b); break;
        case Op::kMul: dot[i] = dot_at(nd.a) * v[nd.b] + v[nd.a] * dot_at(nd.b); break;
        case Op::kDiv: dot[i] = (dot_at(nd.a) - v[i] * dot_at(nd.b)) / v[nd.b]; break;
        case Op::kNeg: dot[i] = -dot_at(nd.a); break;
        case Op::kExp: dot[i] = v[i] * dot_at(nd.a); break;
        case Op::kLog: dot[i] = dot_at(nd.a) / v[nd.a]; break;
        case Op::kPow: dot[i] = nd.aux * std::pow(v[nd.a], nd.aux - 1.0) * dot_at(nd.a); break;
        case Op::kTanh: dot[i] = (1.0 - v[i] * v[i]) * dot_at(nd.a); break;
        case Op::kMax: dot[i] = v[nd.a] >= v[nd.b] ? dot_at(nd.a) : dot_at(nd.b); break;
        case Op::kSelect: dot[i] = v[nd.c] > 0.0 ? dot_at(nd.a) : dot_at(nd.b); break;
      }
    }
    std::fill(adjdot + start, adjdot + root + 1, 0.0);
    const auto col_sink = [&](std::int32_t o, double w) {
      if (o >= start) {
        adjdot[o] += w;
      } else if (o < d) {
        info(o, col) -= w;  // observed information is the negated Hessian
      }
    };
    for (std::int32_t i = root; i >= start; --i) {
      const Node& nd = nodes[i];
      const double a = adj[i];
      const double at = adjdot[i];
      if (a == 0.0 && at == 0.0) continue;
      switch (nd.op) {
        case Op::kParam:
        case Op::kConst:
          break;
        case Op::kAdd:
          col_sink(nd.a, at);
          col_sink(nd.b, at);
          break;
        case Op::kMul:
          col_sink(nd.a, at * v[nd.b] + a * dot_at(nd.b));
          col_sink(nd.b, at * v[nd.a] + a * dot_at(nd.a));
          break;
        case Op::kDiv: {
          const double inv_b = 1.0 / v[nd.b];
          const double y = v[i];
          const double bdot = dot_at(nd.b);
          const double ydot = (dot_at(nd.a) - y * bdot) * inv_b;
          col_sink(nd.a, at * inv_b - a * bdot * inv_b * inv_b);
          col_sink(nd.b, -at * y * inv_b - a * (ydot * inv_b - y * bdot * inv_b * inv_b));
          break;
        }
        case Op::kNeg:
          col_sink(nd.a, -at);
          break;
        case Op::kExp:
          col_sink(nd.a, at * v[i] + a * v[i] * dot_at(nd.a));
          break;
        case Op::kLog: {
          const double inv_a = 1.0 / v[nd.a];
          col_sink(nd.a, at * inv_a - a * dot_at(nd.a) * inv_a * inv_a);
          break;
        }
        case Op::kPow: {
          const double kk = nd.aux;
          col_sink(nd.a, at * kk * std::pow(v[nd.a], kk - 1.0) +
                             a * kk * (kk - 1.0) * std::pow(v[nd.a], kk - 2.0) * dot_at(nd.a));
          break;
        }
        case Op::kTanh: {
          const double y = v[i];
          const double ydot = (1.0 - y * y) * dot_at(nd.a);
          col_sink(nd.a, at * (1.0 - y * y) - a * 2.0 * y * ydot);
          break;
        }
        case Op::kMax:
          col_sink(v[nd.a] >= v[nd.b] ? nd.a : nd.b, at);
          break;
        case Op::kSelect:
          col_sink(v[nd.c] > 0.0 ? nd.a : nd.b, at);
          break;
      }
    }
    dot[col] = 0.0;
  }
}

}  // namespace scorewatch::ad

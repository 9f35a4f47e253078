#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape owns every node; a Var is a (tape, index) handle. Nodes are appended
// in evaluation order so the tape is always topologically sorted and the
// backward sweep is a single reverse pass.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "runet/errors.hpp"
#include "runet/matrix.hpp"

namespace runet {

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatmul,
  kLinear,
  kAdd,
  kSub,
  kHadamard,
  kScale,
  kRelu,
  kRowSoftmax,
  kConcatCols,
  kConcatRows,
  kGatherRows,
  kSliceRows,
  kPairScores,
  kSum,
  kCrossEntropy,
  kL21Norm,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kLinear: return "linear";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kHadamard: return "hadamard";
    case OpKind::kScale: return "scale";
    case OpKind::kRelu: return "relu";
    case OpKind::kRowSoftmax: return "row_softmax";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kPairScores: return "pair_scores";
    case OpKind::kSum: return "sum";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kL21Norm: return "l21_norm";
  }
  return "?";
}

enum class ElementwiseKind { kAdd, kSub, kHadamard };

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  inline const DenseMatrix& value() const;
  inline const DenseMatrix& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  struct Node {
    DenseMatrix value;
    DenseMatrix grad;  // empty until the backward sweep reaches the node
    OpKind op = OpKind::kLeaf;
    bool requires_grad = false;
    bool trainable = false;
    bool broadcast = false;
    double scalar = 0.0;
    std::vector<std::size_t> parents;
    std::vector<std::size_t> index;
    DenseMatrix aux;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable leaf; receives a gradient on backward().
  Var variable(DenseMatrix v) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = true;
    n.trainable = true;
    return push(std::move(n));
  }

  Var constant(DenseMatrix v) {
    Node n;
    n.value = std::move(v);
    return push(std::move(n));
  }

  /// Stop-gradient constant. Values are logged in creation order; a tape
  /// primed with replay_frozen() returns the replayed values instead, which
  /// lets finite differences hold these quantities fixed.
  Var frozen(DenseMatrix v) {
    if (replay_) {
      if (replay_pos_ >= replay_->size()) throw ContractError("frozen: replay log exhausted");
      const DenseMatrix& r = (*replay_)[replay_pos_++];
      if (!r.same_shape(v)) throw ContractError("frozen: replayed " + r.shape() + " where " + v.shape() + " was computed");
      v = r;
    }
    frozen_log_.push_back(v);
    return constant(std::move(v));
  }
  const std::vector<DenseMatrix>& frozen_values() const noexcept { return frozen_log_; }
  void replay_frozen(std::vector<DenseMatrix> values) {
    replay_ = std::move(values);
    replay_pos_ = 0;
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  const DenseMatrix& value(std::size_t id) const { return nodes_[id].value; }

  /// Gradient of the last backward() output with respect to node `id`; zeros
  /// when the node did not influence the output.
  const DenseMatrix& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = DenseMatrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = DenseMatrix();
  }

  /// Drops every node appended after `mark`; leaves created before it survive.
  std::size_t mark() const noexcept { return nodes_.size(); }
  void rewind(std::size_t mark) {
    while (nodes_.size() > mark) nodes_.pop_back();
    zero_grad();
  }

  /// Debug hook: negates the backward contribution of one op kind. Lets the
  /// self-check demonstrate that it catches a broken rule.
  void inject_sign_flip(std::optional<OpKind> kind) { flipped_ = kind; }

  inline void backward(Var output);

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Node& mutable_node(std::size_t id) { return nodes_[id]; }

 private:
  inline void backprop_node(std::size_t id);
  DenseMatrix& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = DenseMatrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::deque<Node> nodes_;  // deque: references from value() survive later pushes
  std::optional<OpKind> flipped_;
  std::vector<DenseMatrix> frozen_log_;
  std::optional<std::vector<DenseMatrix>> replay_;
  std::size_t replay_pos_ = 0;
};

inline const DenseMatrix& Var::value() const { return tape_->value(id_); }
inline const DenseMatrix& Var::grad() const { return tape_->grad(id_); }

namespace detail {

inline void require_same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
}

inline Var make_node(Tape& t, DenseMatrix value, OpKind op, std::vector<std::size_t> parents) {
  Tape::Node n;
  n.value = std::move(value);
  n.op = op;
  for (std::size_t p : parents) n.requires_grad = n.requires_grad || t.node(p).requires_grad;
  n.parents = std::move(parents);
  return t.push(std::move(n));
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b, "matmul");
  return detail::make_node(a.tape(), matmul(a.value(), b.value()), OpKind::kMatmul, {a.id(), b.id()});
}

/// x·Wᵀ, the usual dense layer with W stored as (out × in).
inline Var linear(Var x, Var w) {
  detail::require_same_tape(x, w, "linear");
  const DenseMatrix& xv = x.value();
  const DenseMatrix& wv = w.value();
  if (xv.cols() != wv.cols()) {
    throw DimensionError("linear: input " + xv.shape() + " does not match weight " + wv.shape());
  }
  DenseMatrix out(xv.rows(), wv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    for (std::size_t o = 0; o < wv.rows(); ++o) {
      double s = 0.0;
      for (std::size_t k = 0; k < xv.cols(); ++k) s += xv(i, k) * wv(o, k);
      out(i, o) = s;
    }
  }
  return detail::make_node(x.tape(), std::move(out), OpKind::kLinear, {x.id(), w.id()});
}

/// Elementwise combination. `b` may be a single row broadcast over the rows of `a`.
inline Var elementwise(Var a, Var b, ElementwiseKind kind) {
  detail::require_same_tape(a, b, "elementwise");
  const DenseMatrix& av = a.value();
  const DenseMatrix& bv = b.value();
  const bool broadcast = !av.same_shape(bv) && bv.rows() == 1 && bv.cols() == av.cols();
  if (!av.same_shape(bv) && !broadcast) {
    throw DimensionError("elementwise: shape mismatch " + av.shape() + " vs " + bv.shape());
  }
  DenseMatrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    for (std::size_t j = 0; j < av.cols(); ++j) {
      const double x = av(i, j);
      const double y = broadcast ? bv(0, j) : bv(i, j);
      switch (kind) {
        case ElementwiseKind::kAdd: out(i, j) = x + y; break;
        case ElementwiseKind::kSub: out(i, j) = x - y; break;
        case ElementwiseKind::kHadamard: out(i, j) = x * y; break;
      }
    }
  }
  const OpKind op = kind == ElementwiseKind::kAdd ? OpKind::kAdd
                    : kind == ElementwiseKind::kSub ? OpKind::kSub
                                                     : OpKind::kHadamard;
  Var v = detail::make_node(a.tape(), std::move(out), op, {a.id(), b.id()});
  a.tape().mutable_node(v.id()).broadcast = broadcast;
  return v;
}

inline Var add(Var a, Var b) { return elementwise(a, b, ElementwiseKind::kAdd); }
inline Var sub(Var a, Var b) { return elementwise(a, b, ElementwiseKind::kSub); }
inline Var hadamard(Var a, Var b) { return elementwise(a, b, ElementwiseKind::kHadamard); }

inline Var scale(Var a, double s) {
  DenseMatrix out = s * a.value();
  Var v = detail::make_node(a.tape(), std::move(out), OpKind::kScale, {a.id()});
  a.tape().mutable_node(v.id()).scalar = s;
  return v;
}

/// max(0, x); the subgradient at 0 is 0. NaN stays NaN.
inline Var relu(Var a) {
  DenseMatrix out = a.value();
  for (auto& x : out.data()) x = x < 0.0 ? 0.0 : x;  // NaN passes through
  return detail::make_node(a.tape(), std::move(out), OpKind::kRelu, {a.id()});
}

/// Row-wise softmax. Where `keep` is given, entries with keep == 0 are
/// excluded and come out exactly 0.
inline Var row_softmax(Var a, const std::optional<DenseMatrix>& keep = std::nullopt) {
  const DenseMatrix& av = a.value();
  if (keep && !keep->same_shape(av)) {
    throw DimensionError("row_softmax: mask " + keep->shape() + " vs input " + av.shape());
  }
  DenseMatrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool has_nan = false;
    for (std::size_t j = 0; j < av.cols(); ++j) {
      if (!keep || (*keep)(i, j) != 0.0) {
        mx = std::max(mx, av(i, j));
        has_nan = has_nan || std::isnan(av(i, j));
      }
    }
    // NaN propagates so the caller sees a non-finite loss, not a masking error.
    if (has_nan) {
      for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    if (mx == -std::numeric_limits<double>::infinity()) throw DegenerateRowError(i);
    double z = 0.0;
    for (std::size_t j = 0; j < av.cols(); ++j) {
      if (!keep || (*keep)(i, j) != 0.0) {
        out(i, j) = std::exp(av(i, j) - mx);
        z += out(i, j);
      }
    }
    for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) /= z;
  }
  return detail::make_node(a.tape(), std::move(out), OpKind::kRowSoftmax, {a.id()});
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    detail::require_same_tape(parts[0], p, "concat_cols");
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + parts[0].value().shape() + " vs " + p.value().shape());
    }
    cols += p.cols();
    ids.push_back(p.id());
  }
  DenseMatrix out(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const DenseMatrix& v = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, off + j) = v(i, j);
    off += v.cols();
  }
  return detail::make_node(parts[0].tape(), std::move(out), OpKind::kConcatCols, std::move(ids));
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    detail::require_same_tape(parts[0], p, "concat_rows");
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + parts[0].value().shape() + " vs " + p.value().shape());
    }
    rows += p.rows();
    ids.push_back(p.id());
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return detail::make_node(parts[0].tape(), DenseMatrix(rows, cols, std::move(data)), OpKind::kConcatRows,
                           std::move(ids));
}

/// Picks rows by index (repeats allowed); backward scatter-adds.
inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
  const DenseMatrix& av = a.value();
  DenseMatrix out(rows.size(), av.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= av.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(rows[r]) + " out of range for " + av.shape());
    }
    for (std::size_t j = 0; j < av.cols(); ++j) out(r, j) = av(rows[r], j);
  }
  Var v = detail::make_node(a.tape(), std::move(out), OpKind::kGatherRows, {a.id()});
  a.tape().mutable_node(v.id()).index = std::move(rows);
  return v;
}

inline Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const DenseMatrix& av = a.value();
  if (start + count > av.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + av.shape());
  }
  std::vector<double> data(av.data().begin() + static_cast<std::ptrdiff_t>(start * av.cols()),
                           av.data().begin() + static_cast<std::ptrdiff_t>((start + count) * av.cols()));
  Var v = detail::make_node(a.tape(), DenseMatrix(count, av.cols(), std::move(data)), OpKind::kSliceRows, {a.id()});
  a.tape().mutable_node(v.id()).index = {start};
  return v;
}

/// out(i, j) = row_term(i) + col_term(j) + pair_term(i·n + j), with row_term
/// and col_term n×1 and pair_term n²×1.
inline Var pair_scores(Var row_term, Var col_term, Var pair_term) {
  detail::require_same_tape(row_term, col_term, "pair_scores");
  detail::require_same_tape(row_term, pair_term, "pair_scores");
  const std::size_t n = row_term.rows();
  if (row_term.cols() != 1 || col_term.cols() != 1 || col_term.rows() != n || pair_term.cols() != 1 ||
      pair_term.rows() != n * n) {
    throw DimensionError("pair_scores: expected n x 1, n x 1, n^2 x 1; got " + row_term.value().shape() + ", " +
                         col_term.value().shape() + ", " + pair_term.value().shape());
  }
  DenseMatrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out(i, j) = row_term.value()(i, 0) + col_term.value()(j, 0) + pair_term.value()(i * n + j, 0);
  return detail::make_node(row_term.tape(), std::move(out), OpKind::kPairScores,
                           {row_term.id(), col_term.id(), pair_term.id()});
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return detail::make_node(a.tape(), DenseMatrix(1, 1, s), OpKind::kSum, {a.id()});
}

/// Summed cross-entropy of row-wise softmax(logits) against class targets.
inline Var cross_entropy(Var logits, const std::vector<std::size_t>& targets) {
  const DenseMatrix& lv = logits.value();
  if (targets.size() != lv.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + lv.shape());
  }
  DenseMatrix probs(lv.rows(), lv.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    if (targets[i] >= lv.cols()) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " out of range for " + lv.shape());
    }
    double mx = lv(i, 0);
    for (std::size_t j = 1; j < lv.cols(); ++j) mx = std::max(mx, lv(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < lv.cols(); ++j) {
      probs(i, j) = std::exp(lv(i, j) - mx);
      z += probs(i, j);
    }
    for (std::size_t j = 0; j < lv.cols(); ++j) probs(i, j) /= z;
    total += std::log(z) + mx - lv(i, targets[i]);
  }
  Var v = detail::make_node(logits.tape(), DenseMatrix(1, 1, total), OpKind::kCrossEntropy, {logits.id()});
  auto& n = logits.tape().mutable_node(v.id());
  n.index = targets;
  n.aux = std::move(probs);
  return v;
}

/// Σ_j sqrt(Σ_i P_ij²): sum of column ℓ2 norms.
inline Var l21_norm(Var p) {
  const DenseMatrix& pv = p.value();
  DenseMatrix norms(1, pv.cols());
  double total = 0.0;
  for (std::size_t j = 0; j < pv.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < pv.rows(); ++i) s += pv(i, j) * pv(i, j);
    norms(0, j) = std::sqrt(s);
    total += norms(0, j);
  }
  Var v = detail::make_node(p.tape(), DenseMatrix(1, 1, total), OpKind::kL21Norm, {p.id()});
  p.tape().mutable_node(v.id()).aux = std::move(norms);
  return v;
}

inline void Tape::backward(Var output) {
  if (&output.tape() != this) throw ContractError("backward: output belongs to another tape");
  const DenseMatrix& ov = nodes_[output.id()].value;
  if (ov.rows() != 1 || ov.cols() != 1) {
    throw ContractError("backward: output must be 1x1, got " + ov.shape());
  }
  zero_grad();
  grad_slot(output.id())(0, 0) = 1.0;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    if (!nodes_[id].requires_grad || nodes_[id].grad.empty()) continue;
    backprop_node(id);
  }
}

inline void Tape::backprop_node(std::size_t id) {
  // nodes_ is never resized during the sweep, so these references stay valid.
  const Node& n = nodes_[id];
  const DenseMatrix& g = n.grad;
  const double sign = (flipped_ && *flipped_ == n.op) ? -1.0 : 1.0;
  auto wants = [&](std::size_t p) { return nodes_[p].requires_grad; };

  switch (n.op) {
    case OpKind::kLeaf:
      break;
    case OpKind::kMatmul: {
      const DenseMatrix& a = nodes_[n.parents[0]].value;
      const DenseMatrix& b = nodes_[n.parents[1]].value;
      if (wants(n.parents[0])) {
        DenseMatrix& ga = grad_slot(n.parents[0]);
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t k = 0; k < a.cols(); ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < b.cols(); ++j) s += g(i, j) * b(k, j);
            ga(i, k) += sign * s;
          }
      }
      if (wants(n.parents[1])) {
        DenseMatrix& gb = grad_slot(n.parents[1]);
        for (std::size_t k = 0; k < a.cols(); ++k)
          for (std::size_t i = 0; i < a.rows(); ++i) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) gb(k, j) += sign * aik * g(i, j);
          }
      }
      break;
    }
    case OpKind::kLinear: {
      const DenseMatrix& x = nodes_[n.parents[0]].value;
      const DenseMatrix& w = nodes_[n.parents[1]].value;
      if (wants(n.parents[0])) {
        DenseMatrix& gx = grad_slot(n.parents[0]);
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t o = 0; o < w.rows(); ++o) {
            const double go = g(i, o);
            if (go == 0.0) continue;
            for (std::size_t k = 0; k < x.cols(); ++k) gx(i, k) += sign * go * w(o, k);
          }
      }
      if (wants(n.parents[1])) {
        DenseMatrix& gw = grad_slot(n.parents[1]);
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t o = 0; o < w.rows(); ++o) {
            const double go = g(i, o);
            if (go == 0.0) continue;
            for (std::size_t k = 0; k < x.cols(); ++k) gw(o, k) += sign * go * x(i, k);
          }
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kHadamard: {
      const std::size_t pa = n.parents[0];
      const std::size_t pb = n.parents[1];
      const DenseMatrix& a = nodes_[pa].value;
      const DenseMatrix& b = nodes_[pb].value;
      if (wants(pa)) {
        DenseMatrix& ga = grad_slot(pa);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) {
            const double local = n.op == OpKind::kHadamard ? (n.broadcast ? b(0, j) : b(i, j)) : 1.0;
            ga(i, j) += sign * g(i, j) * local;
          }
      }
      if (wants(pb)) {
        DenseMatrix& gb = grad_slot(pb);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) {
            const double local = n.op == OpKind::kHadamard ? a(i, j) : n.op == OpKind::kSub ? -1.0 : 1.0;
            gb(n.broadcast ? 0 : i, j) += sign * g(i, j) * local;
          }
      }
      break;
    }
    case OpKind::kScale: {
      if (wants(n.parents[0])) {
        DenseMatrix& ga = grad_slot(n.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += sign * n.scalar * g[i];
      }
      break;
    }
    case OpKind::kRelu: {
      if (wants(n.parents[0])) {
        const DenseMatrix& a = nodes_[n.parents[0]].value;
        DenseMatrix& ga = grad_slot(n.parents[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (a[i] > 0.0) ga[i] += sign * g[i];
      }
      break;
    }
    case OpKind::kRowSoftmax: {
      if (wants(n.parents[0])) {
        const DenseMatrix& s = n.value;
        DenseMatrix& ga = grad_slot(n.parents[0]);
        for (std::size_t i = 0; i < s.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < s.cols(); ++j) dot += g(i, j) * s(i, j);
          for (std::size_t j = 0; j < s.cols(); ++j) ga(i, j) += sign * s(i, j) * (g(i, j) - dot);
        }
      }
      break;
    }
    case OpKind::kConcatCols: {
      std::size_t off = 0;
      for (std::size_t p : n.parents) {
        const std::size_t pc = nodes_[p].value.cols();
        if (wants(p)) {
          DenseMatrix& gp = grad_slot(p);
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < pc; ++j) gp(i, j) += sign * g(i, off + j);
        }
        off += pc;
      }
      break;
    }
    case OpKind::kConcatRows: {
      std::size_t off = 0;
      for (std::size_t p : n.parents) {
        const std::size_t count = nodes_[p].value.size();
        if (wants(p)) {
          DenseMatrix& gp = grad_slot(p);
          for (std::size_t k = 0; k < count; ++k) gp[k] += sign * g[off + k];
        }
        off += count;
      }
      break;
    }
    case OpKind::kGatherRows: {
      if (wants(n.parents[0])) {
        DenseMatrix& ga = grad_slot(n.parents[0]);
        for (std::size_t r = 0; r < n.index.size(); ++r)
          for (std::size_t j = 0; j < g.cols(); ++j) ga(n.index[r], j) += sign * g(r, j);
      }
      break;
    }
    case OpKind::kSliceRows: {
      if (wants(n.parents[0])) {
        DenseMatrix& ga = grad_slot(n.parents[0]);
        const std::size_t off = n.index[0] * g.cols();
        for (std::size_t k = 0; k < g.size(); ++k) ga[off + k] += sign * g[k];
      }
      break;
    }
    case OpKind::kPairScores: {
      const std::size_t m = g.rows();
      if (wants(n.parents[0])) {
        DenseMatrix& gr = grad_slot(n.parents[0]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < m; ++j) gr(i, 0) += sign * g(i, j);
      }
      if (wants(n.parents[1])) {
        DenseMatrix& gc = grad_slot(n.parents[1]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < m; ++j) gc(j, 0) += sign * g(i, j);
      }
      if (wants(n.parents[2])) {
        DenseMatrix& gp = grad_slot(n.parents[2]);
        for (std::size_t k = 0; k < g.size(); ++k) gp[k] += sign * g[k];
      }
      break;
    }
    case OpKind::kSum: {
      if (wants(n.parents[0])) {
        DenseMatrix& ga = grad_slot(n.parents[0]);
        for (auto& v : ga.data()) v += sign * g(0, 0);
      }
      break;
    }
    case OpKind::kCrossEntropy: {
      if (wants(n.parents[0])) {
        DenseMatrix& ga = grad_slot(n.parents[0]);
        const DenseMatrix& probs = n.aux;
        for (std::size_t i = 0; i < probs.rows(); ++i)
          for (std::size_t j = 0; j < probs.cols(); ++j) {
            const double local = probs(i, j) - (j == n.index[i] ? 1.0 : 0.0);
            ga(i, j) += sign * g(0, 0) * local;
          }
      }
      break;
    }
    case OpKind::kL21Norm: {
      if (wants(n.parents[0])) {
        const DenseMatrix& p = nodes_[n.parents[0]].value;
        DenseMatrix& ga = grad_slot(n.parents[0]);
        for (std::size_t j = 0; j < p.cols(); ++j) {
          const double c = n.aux(0, j);
          if (c == 0.0) continue;
          for (std::size_t i = 0; i < p.rows(); ++i) ga(i, j) += sign * g(0, 0) * p(i, j) / c;
        }
      }
      break;
    }
  }
}

}  // namespace runet

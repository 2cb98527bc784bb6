#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "davpt/tensor.hpp"

namespace davpt {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

/// Append-only reverse-mode tape. One tape per forward pass; not thread-safe,
/// but independent tapes share nothing.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A value that never receives a gradient.
  Var constant(Tensor value);
  /// A leaf owned by the tape; its gradient is read back with grad().
  Var input(Tensor value, bool requires_grad = true);
  /// A leaf bound to an external parameter. Gradients are accumulated into
  /// `param.grad()` at the end of backward() when the parameter requires them.
  Var parameter(Tensor& param);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  /// Gradient of a node after backward(); empty if the node needs none.
  std::span<const double> grad(Var v) const { return nodes_[v.id].grad; }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Propagates d(loss)/d(node) to every node in reverse append order.
  /// The loss must be a scalar; a tape can be differentiated once.
  void backward(Var loss);

  // Used by operation implementations.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);
  std::span<const double> out_grad(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient buffer of an input, allocated on demand; empty when the input
  /// does not need a gradient.
  std::span<double> in_grad(std::size_t id);
  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    std::vector<double> grad;
    Tensor* bound = nullptr;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Taped operations. Every operation treats its operands through the rank-2
// view of Tensor (rows x cols).

Var matmul(Var a, Var b);
/// a * b^T.
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// Adds a 1 x cols row vector to every row of `a`.
Var add_row(Var a, Var row);
Var exp(Var a);
Var log(Var a);
Var gelu(Var a);
Var sum(Var a);
Var mean(Var a);
Var dot(Var a, Var b);
/// Sum of a elementwise-weighted by constants.
Var weighted_sum(Var a, std::vector<double> weights);
Var softmax_rows(Var a);

/// Row-wise x / ||x||. Rows with norm below kNormEpsilon pass through
/// unchanged; `degenerate` (if given) is set when any row did.
inline constexpr double kNormEpsilon = 1e-12;
Var l2_normalize_rows(Var a, bool* degenerate = nullptr);

inline constexpr double kLayerNormEpsilon = 1e-6;
Var layer_norm(Var x, Var gain, Var bias);

/// Mean softmax cross-entropy of logits rows against integer labels.
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

/// Per row r: log(1 + sum_{c : mask[r][c]} exp(z[r][c])). Output rows x 1.
Var masked_lse0_plus_rows(Var z, std::vector<unsigned char> mask);

struct RowRef {
  Var source;
  std::size_t row;
};
/// Stacks the referenced rows (all sources share cols) into a new matrix.
Var gather_rows(std::span<const RowRef> refs);
/// Rows [begin, end) of a.
Var slice_rows(Var a, std::size_t begin, std::size_t end);

/// Multi-head scaled dot-product attention over `batch` independent
/// sequences stacked row-wise in q, k, v ((batch*seq) x D). If `probs` is
/// non-null it receives the post-softmax maps laid out batch x heads x seq x seq.
Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads,
              std::vector<double>* probs = nullptr);

}  // namespace davpt

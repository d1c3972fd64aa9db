#pragma once

// Tape-based reverse-mode differentiation over peva::Tensor.
//
// Every differentiable op evaluates its value eagerly and, when any input
// requires a gradient, records a backward rule on the owning Tape. Calling
// Tape::backward(root) seeds d(root)=1 and replays the rules in reverse
// recording order. Leaves created with requires_grad=false (frozen inputs)
// never receive a gradient buffer.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "peva/tensor.hpp"

namespace peva {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Gradient after Tape::backward; throws if this node carries none.
  const Tensor& grad() const;
  bool has_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op result. The backward rule is dropped when no input needs a gradient.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  void backward(Var root);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  const Tensor& grad(std::size_t id) const;

  /// Gradient accumulator for a node, allocated on first use; nullptr for
  /// nodes that do not require a gradient.
  Tensor* grad_sink(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

// ---- differentiable ops ----------------------------------------------------

Var matmul(Var a, Var b);
/// a·bᵀ
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
/// x[R×C] + bias[C] broadcast over rows.
Var add_bias(Var x, Var bias);
/// Softmax along `axis` of a rank-2 tensor (or the single axis of a rank-1 one).
Var softmax(Var x, int axis = -1);
/// Per-row normalization over the last axis followed by gamma·x̂ + beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Exact erf-form GELU.
Var gelu(Var x);
Var slice_rows(Var x, std::size_t start, std::size_t count);
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var reshape(Var x, Shape shape);
/// Sum of all entries, shape [1].
Var sum(Var x);
/// Per-row cross-entropy of softmax(logits[R×N]) against labels, shape [R].
Var cross_entropy_rows(Var logits, std::span<const std::size_t> labels);
/// Per-row squared Euclidean distance to a constant target, shape [R].
Var squared_distance_rows(Var x, const Tensor& target);

namespace testing {

/// Mutation hook: flips the sign of one backward rule so verification
/// harnesses can demonstrate that they detect a broken gradient.
enum class BackwardFault { none, matmul, softmax, layer_norm, gelu, add_bias };

void inject_backward_fault(BackwardFault fault);
BackwardFault active_backward_fault();

}  // namespace testing

}  // namespace peva

#pragma once

#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "dra/tensor.hpp"

namespace dra {

// A named trainable array. Gradients live on the Tape that used it, not here.
struct Parameter {
  std::string name;
  Tensor value;
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// node list backwards is a valid topological order for backpropagation.
class Tape {
 public:
  // out_grad is the gradient flowing into the node; implementations add the
  // parents' contributions with accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf whose gradient is retrievable via grad().
  Var input(Tensor value);
  // Leaf bound to a parameter; repeated calls reuse the same node.
  Var param(const Parameter& p);

  // Seeds d(root)/d(root) = 1; root must hold exactly one element.
  void backward(Var root);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  // Zero tensor if no gradient reached the node.
  Tensor grad(Var v) const;
  Tensor param_grad(const Parameter& p) const;

  bool grad_enabled() const { return grad_enabled_; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Op-implementation interface.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  void accumulate(Var v, const Tensor& g);
  // Zero-initialized on first use.
  double* grad_buffer(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
};

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var silu(Var x);
Var relu(Var x);
Var square(Var x);

// ---- reductions ----
Var sum(Var x);
Var mean(Var x);

// ---- linear algebra ----
// a [N, K] times b [K, M].
Var matmul(Var a, Var b);
// x [N, M] plus bias [M] broadcast over rows.
Var add_row_bias(Var x, Var bias);
// Batched product of a [B, M, K] (or [B, K, M] if trans_a) and b [B, K, N]
// (or [B, N, K] if trans_b).
Var batched_matmul(Var a, Var b, bool trans_a, bool trans_b);
// Swap the last two axes of a rank-3 tensor.
Var transpose12(Var x);

// ---- shape ----
Var reshape(Var x, Shape shape);
// Columns [begin, end) of a rank-2 tensor.
Var slice_cols(Var x, int begin, int end);

// ---- image ops (NCHW) ----
// weight [O, C, k, k], bias [O]; square kernel, symmetric zero padding.
Var conv2d(Var x, Var weight, Var bias, int stride, int padding);
Var upsample_nearest2x(Var x);
// Mean over H and W: [N, C, H, W] -> [N, C].
Var spatial_mean(Var x);
// x [N, C, H, W] plus v [N, C] broadcast over pixels.
Var add_channel_bias(Var x, Var v);
// Mean over axis 1 of a rank-3 tensor: [N, T, D] -> [N, D].
Var token_mean(Var x);

// ---- normalization / attention helpers ----
// Normalizes the last axis (size D) and applies gain [D] and bias [D].
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Softmax over the last axis.
Var softmax_last(Var x);

// ---- embeddings ----
// Rows of table [K, C] selected by labels -> [N, C].
Var embedding(Var table, std::span<const int> labels);

// ---- losses (per-row vectors; reduce with sum/mean) ----
// -log softmax(logits)[label] per row: [N, K] -> [N].
Var cross_entropy_rows(Var logits, std::span<const int> labels);
// KL(softmax(p) || softmax(q)) per row: [N, K] x [N, K] -> [N].
Var kl_rows(Var p_logits, Var q_logits);
// Cosine similarity of each row of a with the matching row of target (a
// constant). Rows with zero norm on either side have similarity 0.
Var cosine_rows(Var a, const Tensor& target);

}  // namespace dra

#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "r2m/tensor.hpp"

namespace r2m {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  Tape* tape = nullptr;
  std::size_t id = kNone;

  bool valid() const { return tape != nullptr && id != kNone; }
  const Tensor& value() const;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep visits them in a valid topological order. With recording disabled
/// the tape only evaluates values and keeps no backward closures.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad);
  /// Binds a named parameter. Repeated calls with the same name return the
  /// same node. Gradients are tracked only for trainable entries.
  Var param(const ParamSet& params, const std::string& name);
  /// Like param() but never tracks gradients (frozen sub-networks).
  Var frozen_param(const ParamSet& params, const std::string& name);

  /// Appends an op result. `fn` is dropped when no input requires grad.
  Var record(Tensor value, const std::vector<Var>& inputs, Backward fn);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Zero-initialised gradient accumulator of `v`, for use in Backward fns.
  Tensor& grad_slot(Var v);

  /// Seeds d(loss)/d(loss) = 1 and sweeps backward. `loss` must be 1x1.
  void backward(Var loss);
  /// Gradient of the last backward() w.r.t. `v`, or nullptr if none reached it.
  const Tensor* grad(Var v) const;
  /// Gradients of every bound parameter that received one.
  GradMap param_grads() const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  bool recording_;
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
};

/// Differentiable primitives. Every op treats its operands as rank-2.
namespace ad {

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_bt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Adds a 1 x n row to every row of a.
Var add_row(Var a, Var bias);
Var scale(Var a, double s);
Var add_scalar(Var a, double c);
/// Tanh-approximated GELU.
Var gelu(Var a);
Var tanh(Var a);
/// Rows of `table` selected by `ids`.
Var embedding(Var table, const std::vector<int>& ids);
/// Row-wise layer normalisation with affine gamma/beta rows.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked out.
Var softmax_rows(Var x, bool causal = false);
Var log_softmax_rows(Var x);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_cols(const std::vector<Var>& parts);
/// Column vector whose r-th entry is x(row_offset + r, cols[r]).
Var gather(Var x, std::size_t row_offset, const std::vector<int>& cols);
/// 1 x n row made of n scalar (1x1) variables.
Var stack_scalars(const std::vector<Var>& scalars);
Var entry(Var x, std::size_t r, std::size_t c);
Var sum(Var x);
Var mean(Var x);
/// Mean over rows, giving a 1 x cols row.
Var mean_rows(Var x);

}  // namespace ad
}  // namespace r2m

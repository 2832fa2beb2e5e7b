// Copyright 2026 The vgsg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vgsg/tensor.hpp"

namespace vgsg {

// Trainable tensor with its accumulated gradient.  stop_gradient_tag marks
// teacher-branch parameters: distillation losses detach their teacher
// inputs, so a backward pass of those losses alone must leave every tagged
// parameter's gradient exactly zero (asserted in tests and, optionally, in
// the training step).
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
  bool stop_gradient_tag = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
  double grad_abs_max() const;
};

class Graph;

// Handle to a node on a Graph tape.  Cheap to copy; valid while the graph
// lives.
struct Var {
  Graph* g = nullptr;
  int id = -1;

  const Tensor& val() const;
  bool valid() const { return g != nullptr && id >= 0; }
};

namespace debug {
// Test-only fault injection: negates the gelu backward rule so the
// finite-difference checker can demonstrate that it catches a broken
// gradient.  Never set outside verification fixtures.
extern bool flip_gelu_backward;
}  // namespace debug

// Reverse-mode autodiff tape.  Operations append nodes in evaluation
// order; since every node's parents precede it, walking ids backwards is
// a valid topological order for the backward sweep.
//
// backward() may be called more than once per graph (with different or
// identical seeds); node adjoints are reset between calls while Parameter
// gradients keep accumulating.  That property is what lets the trainer
// split one step's backward into a distillation phase and a task phase
// when verifying the stop-gradient contract.
class Graph {
 public:
  using BackFn = std::function<void(Graph&, int)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf holding a fixed tensor; receives no gradient.
  Var constant(Tensor t);
  // Leaf bound to a Parameter; backward adds into p.grad when trainable.
  Var leaf(Parameter& p);

  // Reverse sweep from a scalar seed with adjoint 1.
  void backward(Var seed);

  int add_node(Tensor value, std::vector<int> parents, BackFn back, bool needs_grad);

  const Tensor& value_of(int id) const;
  // Adjoint buffer of a node, allocated zero on first touch.
  Tensor& adjoint_of(int id);
  bool has_adjoint(int id) const;
  bool needs_grad(int id) const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor adjoint;
    std::vector<int> parents;
    BackFn back;
    Parameter* param = nullptr;
    bool has_adj = false;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  friend struct Var;
};

double scalar_of(Var v);

// Elementwise arithmetic on identically shaped operands.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
// Row broadcast: m is R x C, bias has C entries.
Var add_rows(Var m, Var bias);

Var matmul(Var a, Var b);
// a @ b^T without materializing the transpose.
Var matmul_nt(Var a, Var b);
Var dot(Var u, Var v);

Var gelu(Var x);
Var softplus(Var x);

Var sum(Var x);
Var mean(Var x);
// Column means of an R x C matrix -> C-vector.
Var mean_rows(Var m);

Var reshape(Var x, std::vector<int> shape);
Var row_slice(Var m, int r0, int r1);
Var col_slice(Var m, int c0, int c1);
// Vertical stack; rank-1 parts are treated as single rows.
Var concat_rows(const std::vector<Var>& parts);
// Horizontal stack of rank-2 parts sharing a row count.
Var concat_cols(const std::vector<Var>& parts);
// Flat concatenation of rank-1 parts.
Var concat_vec(const std::vector<Var>& parts);
// rows*cols scalar nodes -> matrix, row-major.
Var stack_scalars(const std::vector<Var>& scalars, int rows, int cols);
Var gather_entries(Var m, const std::vector<std::pair<int, int>>& idx);
// Rows of an embedding table selected by id; ids are validated against
// the table height.
Var embedding_rows(Var table, const std::vector<int>& ids);

// Row softmax.  Accepts rank 1 (single row) or rank 2.  Max-shifted, so
// extreme logits stay finite.
Var softmax_rows(Var m);
// Row softmax over unmasked columns only; masked outputs are exactly 0.
Var masked_softmax_rows(Var m, const std::vector<char>& col_mask);

// Per-row normalization over the last axis with learned gain and bias.
Var layer_norm_rows(Var x, Var gain, Var bias, double eps);
Var l2_normalize_rows(Var m);
Var cosine(Var u, Var v);

// (C, H, W) feature map -> (H*W, C) row matrix, pixel-major.
Var chw_to_pxc(Var chw);
// 3x3 same-padding convolution, stride 1: input (Cin, H, W), weight
// (Cout, Cin, 3, 3), bias (Cout).
Var conv2d_3x3(Var input, Var weight, Var bias);
Var avg_pool_2x2(Var input);
// Layer norm across the channel axis at each spatial position.
Var layer_norm_channels(Var chw, Var gain, Var bias, double eps);

// Per-feature normalization over the batch axis.  Training mode uses the
// batch statistics and folds them into the running ones; eval mode reads
// the running statistics only.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  Tensor count;  // single element; number of batches folded in
  double momentum = 0.1;

  explicit BatchNormState(int features)
      : running_mean({features}), running_var(Tensor::full({features}, 1.0)), count({1}) {}
};
Var batch_norm_cols(Var x, Var gain, Var bias, BatchNormState& state, bool training,
                    double eps);

// Mean cross entropy against label-smoothed targets: the true class gets
// 1 - eps, every other class eps / (N - 1).
Var softmax_cross_entropy(Var logits, const std::vector<int>& labels, double eps);

// Mean over rows of KL(p || q) with natural log.  Both arguments must be
// row-stochastic within 1e-5; q is floored at 1e-12 inside the log, and
// p rows may contain exact zeros (0 log 0 := 0).
Var kl_div_rows(Var p, Var q);

Var mse(Var a, Var b);

// Value copy with no graph history; the cut point of the stop-gradient
// contract.
Var detach(Var x);

}  // namespace vgsg

#pragma once

#include <functional>
#include <vector>

#include "vigil/matrix.hpp"
#include "vigil/ops.hpp"

namespace vigil {

// Handle to a node on a GradTape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// One supervised (row, col) pick inside a logits matrix, weighted.
struct NllPick {
  int row = 0;
  int col = 0;
  double weight = 1.0;
};

// Reverse-mode tape. Forward calls record the operation and enough saved
// state to run the backward pass; backward() replays the record in exact
// reverse order, accumulating gradients additively. Single-threaded by
// contract: one tape, one thread.
class GradTape {
 public:
  // Leaves. Parameters get gradients, constants do not.
  Var param(Matrix value);
  Var constant(Matrix value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var hadamard(Var a, Var b);
  Var scale(Var a, double s);
  Var add_row(Var a, Var row);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var slice_rows(Var a, int r0, int r1);
  Var slice_cols(Var a, int c0, int c1);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var softmax_rows(Var x);
  Var softmax_rows_masked(Var x, Matrix mask);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  Var gelu(Var x);

  // Scalar-valued (1x1) losses.
  Var mse(Var a, Var b);
  Var cross_entropy(Var logits, std::vector<int> targets);
  // sum_k weight_k * (-log softmax(logits)[row_k, col_k]) / normalizer.
  // The shared building block behind the text and gate loss terms.
  Var picked_nll(Var logits, std::vector<NllPick> picks, double normalizer);

  const Matrix& value(Var v) const;
  const Matrix& grad(Var v) const;
  double scalar(Var v) const;

  // Seeds d(root)/d(root) = 1 and walks the record backwards. root must
  // be 1x1. Gradients of non-finite magnitude throw NumericError.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(GradTape&, const Matrix&)> backprop;  // receives this node's grad
  };

  Var push(Matrix value, bool requires_grad,
           std::function<void(GradTape&, const Matrix&)> backprop);
  Node& node(Var v);
  const Node& node(Var v) const;
  void accumulate(Var v, const Matrix& g);
  bool needs_grad(Var v) const { return node(v).requires_grad; }

  std::vector<Node> nodes_;
};

// Scalar function and its analytic gradient at a point, as produced by
// some tape program. finite_diff_check compares the gradient against
// central differences.
struct DiffProbe {
  std::function<double(const Matrix&)> f;
  std::function<Matrix(const Matrix&)> grad;
};

// Max over coordinates of |analytic - central| / (|analytic| + 1e-8).
// step must lie in [1e-7, 1e-3].
double finite_diff_check(const DiffProbe& op, const Matrix& point, double step);

}  // namespace vigil

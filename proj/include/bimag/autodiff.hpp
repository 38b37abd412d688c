#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records every intermediate value of one forward pass; backward()
// walks it in reverse. Tokens are rows: an L x D matrix holds L tokens of
// width D. Nodes are addressed by index, so closures stay valid while the
// node vector grows.

#include <Eigen/Core>

#include <functional>
#include <span>
#include <vector>

namespace bimag::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var constant(Matrix value);
  Var variable(Matrix value);  // leaf that receives a gradient
  // Leaf bound to caller-owned storage, which must outlive the tape.
  Var parameter(const Matrix& storage);

  const Matrix& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.external ? *n.external : n.value;
  }
  const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(out)/d(out) = 1 for a 1x1 output and propagates.
  void backward(Var out);

  // Used by op implementations.
  Var push(Matrix value, std::initializer_list<Var> parents, std::function<void(Tape&, int)> back);
  Matrix& grad_mut(Var v);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, int)> back;
    bool requires_grad = false;
    const Matrix* external = nullptr;
  };
  std::vector<Node> nodes_;
  bool record_;
};

Var matmul(Tape& t, Var a, Var b);
Var matmul_nt(Tape& t, Var a, Var b);  // a * b^T
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var add_row(Tape& t, Var a, Var row);  // broadcast a 1 x n row over every row of a
Var add_const(Tape& t, Var a, const Matrix& c);
Var hadamard(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var gelu(Tape& t, Var a);
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);
Var softmax_rows(Tape& t, Var a);
Var slice_rows(Tape& t, Var a, int row, int count);
Var slice_cols(Tape& t, Var a, int col, int count);
Var concat_rows(Tape& t, std::span<const Var> parts);
Var concat_cols(Tape& t, std::span<const Var> parts);
Var masked_mean_rows(Tape& t, Var a, const std::vector<bool>& mask);
Var smooth_l1(Tape& t, Var pred, const Matrix& target, double beta);
Var cross_entropy(Tape& t, Var logits, int label);

// Plain-value versions shared with tests and metrics.
double smooth_l1_value(const Matrix& pred, const Matrix& target, double beta);
double gelu_value(double x);

}  // namespace bimag::ad

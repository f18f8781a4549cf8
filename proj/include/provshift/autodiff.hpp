#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

namespace provshift::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

// Reverse-mode tape over dense matrices. Nodes are appended in evaluation
// order and backward() walks them in reverse, so gradient accumulation
// order is fixed and results are bit-reproducible.
class Tape {
 public:
  Var constant(Matrix value);
  // Leaf whose gradient is retrieved after backward().
  Var variable(Matrix value);

  // Seeds d(output)/d(output) = 1; output must be 1x1.
  void backward(Var output);
  const Matrix& grad(Var v) const;

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  // Node construction for operations.
  Var push(Matrix value, std::vector<int> parents, std::function<void(Tape&, int)> backward);
  Matrix& grad_ref(int id);
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;  // allocated lazily
    std::vector<int> parents;
    std::function<void(Tape&, int)> backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Elementwise and linear algebra.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);          // Hadamard
Var div(Var a, Var b);          // Hadamard
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_row(Var a, Var row);    // a (n x d) + broadcast row (1 x d)
Var sub_row(Var a, Var row);
Var add_col_row(Var col, Var row);  // (n x 1) + (1 x m) -> n x m
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var sqrt(Var a);
Var recip(Var a);

// Reductions.
Var sum(Var a);                      // 1 x 1
Var mean(Var a);                     // 1 x 1
Var col_mean(Var a);                 // 1 x d
Var row_sum(Var a);                  // n x 1
Var dot(Var a, Var b);               // sum(a .* b), 1 x 1

// Structure.
Var concat_cols(Var a, Var b);
Var concat_rows(Var a, Var b);
Var select_rows(Var a, const std::vector<int>& rows);
Var repeat_rows(Var row, Eigen::Index n);  // 1 x d -> n x d

// Row-wise softmax of logits.
Var softmax(Var logits);
// Per-example cross-entropy -sum_k t_ik log softmax(l)_ik, n x 1.
Var cross_entropy_rows(Var logits, const Matrix& targets);
// sum_i c_i * ce_i for fixed coefficients.
Var weighted_sum_rows(Var per_row, const Eigen::VectorXd& coeffs);
// Per-example generalized cross-entropy (1 - p_y^q) / q, n x 1.
Var gce_rows(Var logits, const std::vector<int>& labels, double q);
// Rows scaled to unit L2 norm (plus eps in the norm).
Var l2_normalize_rows(Var a, double eps = 1e-12);

}  // namespace provshift::ad

#include "provshift/autodiff.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>

namespace provshift::ad {

const Matrix& Var::value() const { return tape->value(id); }

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Matrix value, std::vector<int> parents, std::function<void(Tape&, int)> backward) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(p)].requires_grad;
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var output) {
  if (output.rows() != 1 || output.cols() != 1) throw std::invalid_argument("backward needs a 1x1 output");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!requires_grad(output.id)) return;
  grad_ref(output.id)(0, 0) = 1.0;
  for (int i = output.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

const Matrix& Tape::grad(Var v) const {
  static const Matrix kEmpty;
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  return n.grad.size() == 0 ? kEmpty : n.grad;
}

namespace {

// Accumulate into a parent only when it participates in differentiation.
template <typename Expr>
void acc(Tape& t, int parent, const Expr& g) {
  if (t.requires_grad(parent)) t.grad_ref(parent).noalias() += g;
}

const Matrix& G(Tape& t, int self) { return t.grad_ref(self); }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix v = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return t.push(std::move(v), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = G(t, self);
    if (t.requires_grad(ia)) t.grad_ref(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad_ref(ib).noalias() += t.value(ia).transpose() * g;
  });
}

Var transpose(Var a) {
  const int ia = a.id;
  return a.tape->push(a.value().transpose(), {ia}, [ia](Tape& t, int self) { acc(t, ia, G(t, self).transpose()); });
}

Var add(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    acc(t, ia, G(t, self));
    acc(t, ib, G(t, self));
  });
}

Var sub(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    acc(t, ia, G(t, self));
    acc(t, ib, -G(t, self));
  });
}

Var mul(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
    acc(t, ia, G(t, self).cwiseProduct(t.value(ib)));
    acc(t, ib, G(t, self).cwiseProduct(t.value(ia)));
  });
}

Var div(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseQuotient(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = G(t, self);
    const Matrix& bv = t.value(ib);
    acc(t, ia, g.cwiseQuotient(bv));
    if (t.requires_grad(ib)) {
      t.grad_ref(ib) -= g.cwiseProduct(t.value(self)).cwiseQuotient(bv);
    }
  });
}

Var scale(Var a, double s) {
  const int ia = a.id;
  return a.tape->push(a.value() * s, {ia}, [ia, s](Tape& t, int self) { acc(t, ia, G(t, self) * s); });
}

Var add_scalar(Var a, double s) {
  const int ia = a.id;
  return a.tape->push((a.value().array() + s).matrix(), {ia}, [ia](Tape& t, int self) { acc(t, ia, G(t, self)); });
}

Var add_row(Var a, Var row) {
  assert(row.rows() == 1 && row.cols() == a.cols());
  const int ia = a.id, ir = row.id;
  Matrix v = a.value().rowwise() + row.value().row(0);
  return a.tape->push(std::move(v), {ia, ir}, [ia, ir](Tape& t, int self) {
    acc(t, ia, G(t, self));
    acc(t, ir, G(t, self).colwise().sum());
  });
}

Var sub_row(Var a, Var row) {
  assert(row.rows() == 1 && row.cols() == a.cols());
  const int ia = a.id, ir = row.id;
  Matrix v = a.value().rowwise() - row.value().row(0);
  return a.tape->push(std::move(v), {ia, ir}, [ia, ir](Tape& t, int self) {
    acc(t, ia, G(t, self));
    acc(t, ir, -G(t, self).colwise().sum());
  });
}

Var add_col_row(Var col, Var row) {
  assert(col.cols() == 1 && row.rows() == 1);
  const int ic = col.id, ir = row.id;
  Matrix v = col.value().replicate(1, row.cols()).rowwise() + row.value().row(0);
  return col.tape->push(std::move(v), {ic, ir}, [ic, ir](Tape& t, int self) {
    acc(t, ic, G(t, self).rowwise().sum());
    acc(t, ir, G(t, self).colwise().sum());
  });
}

Var tanh(Var a) {
  const int ia = a.id;
  Matrix v = a.value().array().tanh().matrix();
  return a.tape->push(std::move(v), {ia}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    acc(t, ia, G(t, self).cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var relu(Var a) {
  const int ia = a.id;
  Matrix v = a.value().cwiseMax(0.0);
  return a.tape->push(std::move(v), {ia}, [ia](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    acc(t, ia, (x.array() > 0.0).select(G(t, self).array(), 0.0).matrix());
  });
}

Var exp(Var a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().exp().matrix(), {ia}, [ia](Tape& t, int self) {
    acc(t, ia, G(t, self).cwiseProduct(t.value(self)));
  });
}

Var log(Var a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().log().matrix(), {ia}, [ia](Tape& t, int self) {
    acc(t, ia, G(t, self).cwiseQuotient(t.value(ia)));
  });
}

Var square(Var a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().square().matrix(), {ia}, [ia](Tape& t, int self) {
    acc(t, ia, 2.0 * G(t, self).cwiseProduct(t.value(ia)));
  });
}

Var sqrt(Var a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().sqrt().matrix(), {ia}, [ia](Tape& t, int self) {
    acc(t, ia, (0.5 * G(t, self).array() / t.value(self).array()).matrix());
  });
}

Var recip(Var a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().inverse().matrix(), {ia}, [ia](Tape& t, int self) {
    acc(t, ia, (-G(t, self).array() * t.value(self).array().square()).matrix());
  });
}

Var sum(Var a) {
  const int ia = a.id;
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape->push(std::move(v), {ia}, [ia](Tape& t, int self) {
    const double g = G(t, self)(0, 0);
    if (t.requires_grad(ia)) t.grad_ref(ia).array() += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var col_mean(Var a) {
  const int ia = a.id;
  const double n = static_cast<double>(a.rows());
  Matrix v = a.value().colwise().mean();
  return a.tape->push(std::move(v), {ia}, [ia, n](Tape& t, int self) {
    if (t.requires_grad(ia)) t.grad_ref(ia).rowwise() += G(t, self).row(0) / n;
  });
}

Var row_sum(Var a) {
  const int ia = a.id;
  Matrix v = a.value().rowwise().sum();
  return a.tape->push(std::move(v), {ia}, [ia](Tape& t, int self) {
    if (t.requires_grad(ia)) t.grad_ref(ia).colwise() += G(t, self).col(0);
  });
}

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var concat_cols(Var a, Var b) {
  assert(a.rows() == b.rows());
  const int ia = a.id, ib = b.id;
  const Eigen::Index ca = a.cols();
  Matrix v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  return a.tape->push(std::move(v), {ia, ib}, [ia, ib, ca](Tape& t, int self) {
    const Matrix& g = G(t, self);
    acc(t, ia, g.leftCols(ca));
    acc(t, ib, g.rightCols(g.cols() - ca));
  });
}

Var concat_rows(Var a, Var b) {
  assert(a.cols() == b.cols());
  const int ia = a.id, ib = b.id;
  const Eigen::Index ra = a.rows();
  Matrix v(a.rows() + b.rows(), a.cols());
  v << a.value(), b.value();
  return a.tape->push(std::move(v), {ia, ib}, [ia, ib, ra](Tape& t, int self) {
    const Matrix& g = G(t, self);
    acc(t, ia, g.topRows(ra));
    acc(t, ib, g.bottomRows(g.rows() - ra));
  });
}

Var select_rows(Var a, const std::vector<int>& rows) {
  const int ia = a.id;
  Matrix v(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  return a.tape->push(std::move(v), {ia}, [ia, rows](Tape& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Matrix& g = G(t, self);
    Matrix& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < rows.size(); ++i) ga.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var repeat_rows(Var row, Eigen::Index n) {
  assert(row.rows() == 1);
  const int ir = row.id;
  return row.tape->push(row.value().replicate(n, 1), {ir}, [ir](Tape& t, int self) {
    acc(t, ir, G(t, self).colwise().sum());
  });
}

namespace {

Matrix softmax_value(const Matrix& logits) {
  Matrix out = logits;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Matrix log_softmax_value(const Matrix& logits) {
  Matrix out = logits;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    const double lse = m + std::log((out.row(i).array() - m).exp().sum());
    out.row(i).array() -= lse;
  }
  return out;
}

}  // namespace

Var softmax(Var logits) {
  const int il = logits.id;
  return logits.tape->push(softmax_value(logits.value()), {il}, [il](Tape& t, int self) {
    if (!t.requires_grad(il)) return;
    const Matrix& p = t.value(self);
    const Matrix& g = G(t, self);
    const Eigen::VectorXd inner = g.cwiseProduct(p).rowwise().sum();
    Matrix d = p.cwiseProduct(g.colwise() - inner);
    t.grad_ref(il) += d;
  });
}

Var cross_entropy_rows(Var logits, const Matrix& targets) {
  assert(targets.rows() == logits.rows() && targets.cols() == logits.cols());
  const int il = logits.id;
  const Matrix logp = log_softmax_value(logits.value());
  Matrix v = -(logp.cwiseProduct(targets)).rowwise().sum();
  return logits.tape->push(std::move(v), {il}, [il, logp, targets](Tape& t, int self) {
    if (!t.requires_grad(il)) return;
    const Matrix& g = G(t, self);  // n x 1
    const Eigen::VectorXd tsum = targets.rowwise().sum();
    // d/dl_ik = sum_j t_ij * p_ik - t_ik
    Matrix p = logp.array().exp().matrix();
    Matrix d = p.array().colwise() * tsum.array();
    d -= targets;
    d.array().colwise() *= g.col(0).array();
    t.grad_ref(il) += d;
  });
}

Var weighted_sum_rows(Var per_row, const Eigen::VectorXd& coeffs) {
  assert(per_row.cols() == 1 && per_row.rows() == coeffs.size());
  const int ir = per_row.id;
  Matrix v(1, 1);
  v(0, 0) = per_row.value().col(0).dot(coeffs);
  return per_row.tape->push(std::move(v), {ir}, [ir, coeffs](Tape& t, int self) {
    if (t.requires_grad(ir)) t.grad_ref(ir).col(0) += G(t, self)(0, 0) * coeffs;
  });
}

Var gce_rows(Var logits, const std::vector<int>& labels, double q) {
  const int il = logits.id;
  const Matrix p = softmax_value(logits.value());
  Matrix v(p.rows(), 1);
  Eigen::VectorXd py(p.rows());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    py(i) = p(i, labels[static_cast<std::size_t>(i)]);
    v(i, 0) = (1.0 - std::pow(py(i), q)) / q;
  }
  return logits.tape->push(std::move(v), {il}, [il, p, py, labels, q](Tape& t, int self) {
    if (!t.requires_grad(il)) return;
    const Matrix& g = G(t, self);
    Matrix& gl = t.grad_ref(il);
    // d/dl_k of -(p_y^q)/q = -p_y^q (1{k=y} - p_k)
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double c = -std::pow(py(i), q) * g(i, 0);
      for (Eigen::Index k = 0; k < p.cols(); ++k) {
        const double ind = (k == labels[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
        gl(i, k) += c * (ind - p(i, k));
      }
    }
  });
}

Var l2_normalize_rows(Var a, double eps) {
  Tape& t = *a.tape;
  Var norms = sqrt(add_scalar(row_sum(square(a)), eps));
  Var inv = recip(norms);  // n x 1
  // Broadcast inv across columns by multiplying with a ones row.
  Var ones = t.constant(Matrix::Ones(1, a.cols()));
  return mul(a, matmul(inv, ones));
}

}  // namespace provshift::ad

#include "bimag/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace bimag::ad {

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, record_});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(const Matrix& storage) {
  nodes_.push_back(Node{Matrix(), {}, {}, record_, &storage});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Matrix value, std::initializer_list<Var> parents,
               std::function<void(Tape&, int)> back) {
  bool needs = false;
  if (record_) {
    for (Var p : parents) needs = needs || nodes_[static_cast<std::size_t>(p.id)].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(back) : nullptr, needs});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad_mut(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) {
    const Matrix& v = n.external ? *n.external : n.value;
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

void Tape::backward(Var out) {
  if (!record_) throw std::logic_error("backward on a tape that does not record");
  const Matrix& v = value(out);
  if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("backward needs a scalar output");
  grad_mut(out).setOnes();
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.back && n.grad.size() != 0) n.back(*this, i);
  }
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                "x" + std::to_string(b.cols()) + ")");
  }
}

// Adds g into the gradient of v when v participates in differentiation.
template <typename Expr>
void accumulate(Tape& t, Var v, const Expr& g) {
  if (t.requires_grad(v)) t.grad_mut(v) += g;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  return t.push(av * bv, {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    if (tp.requires_grad(a)) tp.grad_mut(a).noalias() += g * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad_mut(b).noalias() += tp.value(a).transpose() * g;
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.cols()) throw std::invalid_argument("matmul_nt: inner dimensions differ");
  return t.push(av * bv.transpose(), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    if (tp.requires_grad(a)) tp.grad_mut(a).noalias() += g * tp.value(b);
    if (tp.requires_grad(b)) tp.grad_mut(b).noalias() += g.transpose() * tp.value(a);
  });
}

Var add(Tape& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "add");
  return t.push(t.value(a) + t.value(b), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    accumulate(tp, a, g);
    accumulate(tp, b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "sub");
  return t.push(t.value(a) - t.value(b), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    accumulate(tp, a, g);
    if (tp.requires_grad(b)) tp.grad_mut(b) -= g;
  });
}

Var add_row(Tape& t, Var a, Var row) {
  const Matrix& av = t.value(a);
  const Matrix& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) throw std::invalid_argument("add_row: bad row shape");
  Matrix out = av;
  out.rowwise() += rv.row(0);
  return t.push(std::move(out), {a, row}, [a, row](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    accumulate(tp, a, g);
    if (tp.requires_grad(row)) tp.grad_mut(row) += g.colwise().sum();
  });
}

Var add_const(Tape& t, Var a, const Matrix& c) {
  check_same_shape(t.value(a), c, "add_const");
  return t.push(t.value(a) + c, {a}, [a](Tape& tp, int self) { accumulate(tp, a, tp.grad(Var{self})); });
}

Var hadamard(Tape& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "hadamard");
  return t.push(t.value(a).cwiseProduct(t.value(b)), {a, b}, [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    if (tp.requires_grad(a)) tp.grad_mut(a) += g.cwiseProduct(tp.value(b));
    if (tp.requires_grad(b)) tp.grad_mut(b) += g.cwiseProduct(tp.value(a));
  });
}

Var scale(Tape& t, Var a, double s) {
  return t.push(t.value(a) * s, {a}, [a, s](Tape& tp, int self) {
    if (tp.requires_grad(a)) tp.grad_mut(a) += s * tp.grad(Var{self});
  });
}

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

Var gelu(Tape& t, Var a) {
  const Matrix out = t.value(a).unaryExpr([](double x) { return gelu_value(x); });
  return t.push(out, {a}, [a](Tape& tp, int self) {
    if (!tp.requires_grad(a)) return;
    const Matrix d = tp.value(a).unaryExpr([](double x) {
      const double u = kGeluC * (x + kGeluA * x * x * x);
      const double th = std::tanh(u);
      return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    });
    tp.grad_mut(a) += tp.grad(Var{self}).cwiseProduct(d);
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = t.value(x);
  const Eigen::Index n = xv.cols();
  if (t.value(gamma).cols() != n || t.value(beta).cols() != n) {
    throw std::invalid_argument("layer_norm: parameter width mismatch");
  }
  Matrix xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std[r];
  }
  Matrix out = xhat.array().rowwise() * t.value(gamma).row(0).array();
  out.rowwise() += t.value(beta).row(0);
  return t.push(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat, inv_std](Tape& tp, int self) {
                  const Matrix& g = tp.grad(Var{self});
                  if (tp.requires_grad(gamma)) tp.grad_mut(gamma) += g.cwiseProduct(xhat).colwise().sum();
                  if (tp.requires_grad(beta)) tp.grad_mut(beta) += g.colwise().sum();
                  if (!tp.requires_grad(x)) return;
                  const Matrix gh = g.array().rowwise() * tp.value(gamma).row(0).array();
                  Matrix& gx = tp.grad_mut(x);
                  for (Eigen::Index r = 0; r < gh.rows(); ++r) {
                    const double m1 = gh.row(r).mean();
                    const double m2 = gh.row(r).cwiseProduct(xhat.row(r)).mean();
                    gx.row(r).array() +=
                        inv_std[r] * (gh.row(r).array() - m1 - xhat.row(r).array() * m2);
                  }
                });
}

Var softmax_rows(Tape& t, Var a) {
  const Matrix& av = t.value(a);
  Matrix out(av.rows(), av.cols());
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    const double m = av.row(r).maxCoeff();
    out.row(r) = (av.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return t.push(out, {a}, [a](Tape& tp, int self) {
    if (!tp.requires_grad(a)) return;
    const Matrix& y = tp.value(Var{self});
    const Matrix& g = tp.grad(Var{self});
    const Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
    Matrix& ga = tp.grad_mut(a);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dots[r]);
    }
  });
}

Var slice_rows(Tape& t, Var a, int row, int count) {
  const Matrix& av = t.value(a);
  if (row < 0 || count < 0 || row + count > av.rows()) throw std::out_of_range("slice_rows");
  return t.push(av.middleRows(row, count), {a}, [a, row, count](Tape& tp, int self) {
    if (tp.requires_grad(a)) tp.grad_mut(a).middleRows(row, count) += tp.grad(Var{self});
  });
}

Var slice_cols(Tape& t, Var a, int col, int count) {
  const Matrix& av = t.value(a);
  if (col < 0 || count < 0 || col + count > av.cols()) throw std::out_of_range("slice_cols");
  return t.push(av.middleCols(col, count), {a}, [a, col, count](Tape& tp, int self) {
    if (tp.requires_grad(a)) tp.grad_mut(a).middleCols(col, count) += tp.grad(Var{self});
  });
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: nothing to join");
  const Eigen::Index cols = t.value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw std::invalid_argument("concat_rows: width mismatch");
    rows += t.value(p).rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, t.value(p).rows()) = t.value(p);
    r += t.value(p).rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  Var any = ps[0];
  for (Var p : ps) {
    if (t.requires_grad(p)) any = p;
  }
  return t.push(std::move(out), {any}, [ps](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    Eigen::Index off = 0;
    for (Var p : ps) {
      const Eigen::Index n = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.grad_mut(p) += g.middleRows(off, n);
      off += n;
    }
  });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: nothing to join");
  const Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) throw std::invalid_argument("concat_cols: height mismatch");
    cols += t.value(p).cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, t.value(p).cols()) = t.value(p);
    c += t.value(p).cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  Var any = ps[0];
  for (Var p : ps) {
    if (t.requires_grad(p)) any = p;
  }
  return t.push(std::move(out), {any}, [ps](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    Eigen::Index off = 0;
    for (Var p : ps) {
      const Eigen::Index n = tp.value(p).cols();
      if (tp.requires_grad(p)) tp.grad_mut(p) += g.middleCols(off, n);
      off += n;
    }
  });
}

Var masked_mean_rows(Tape& t, Var a, const std::vector<bool>& mask) {
  const Matrix& av = t.value(a);
  if (static_cast<Eigen::Index>(mask.size()) != av.rows()) {
    throw std::invalid_argument("masked_mean_rows: mask length differs from token count");
  }
  Matrix sum = Matrix::Zero(1, av.cols());
  int count = 0;
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    if (mask[static_cast<std::size_t>(r)]) {
      sum += av.row(r);
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("masked_mean_rows: empty mask");
  sum /= static_cast<double>(count);
  return t.push(std::move(sum), {a}, [a, mask, count](Tape& tp, int self) {
    if (!tp.requires_grad(a)) return;
    const Matrix g = tp.grad(Var{self}) / static_cast<double>(count);
    Matrix& ga = tp.grad_mut(a);
    for (Eigen::Index r = 0; r < ga.rows(); ++r) {
      if (mask[static_cast<std::size_t>(r)]) ga.row(r) += g.row(0);
    }
  });
}

double smooth_l1_value(const Matrix& pred, const Matrix& target, double beta) {
  check_same_shape(pred, target, "smooth_l1");
  if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be positive");
  double total = 0.0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const double e = std::abs(pred.data()[i] - target.data()[i]);
    total += e < beta ? 0.5 * e * e / beta : e - 0.5 * beta;
  }
  return total / static_cast<double>(pred.size());
}

Var smooth_l1(Tape& t, Var pred, const Matrix& target, double beta) {
  const double v = smooth_l1_value(t.value(pred), target, beta);
  Matrix out(1, 1);
  out(0, 0) = v;
  return t.push(std::move(out), {pred}, [pred, target, beta](Tape& tp, int self) {
    if (!tp.requires_grad(pred)) return;
    const double g = tp.grad(Var{self})(0, 0) / static_cast<double>(target.size());
    const Matrix e = tp.value(pred) - target;
    const Matrix d = e.unaryExpr([beta](double x) {
      return std::abs(x) < beta ? x / beta : (x > 0.0 ? 1.0 : -1.0);
    });
    tp.grad_mut(pred) += g * d;
  });
}

Var cross_entropy(Tape& t, Var logits, int label) {
  const Matrix& lv = t.value(logits);
  if (lv.rows() != 1) throw std::invalid_argument("cross_entropy: expects a single row of logits");
  if (label < 0 || label >= lv.cols()) throw std::invalid_argument("cross_entropy: label out of range");
  const double m = lv.maxCoeff();
  const double lse = m + std::log((lv.array() - m).exp().sum());
  Matrix out(1, 1);
  out(0, 0) = lse - lv(0, label);
  return t.push(std::move(out), {logits}, [logits, label, lse](Tape& tp, int self) {
    if (!tp.requires_grad(logits)) return;
    const double g = tp.grad(Var{self})(0, 0);
    Matrix p = (tp.value(logits).array() - lse).exp();
    p(0, label) -= 1.0;
    tp.grad_mut(logits) += g * p;
  });
}

}  // namespace bimag::ad

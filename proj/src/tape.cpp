#include "openx/tape.hpp"

#include "openx/error.hpp"

#include <cmath>
#include <memory>

namespace openx {

Param& ParamStore::add(const std::string& name, Matrix init) {
  if (params_.count(name)) throw StructuralError("duplicate parameter '" + name + "'");
  Matrix grad = Matrix::Zero(init.rows(), init.cols());
  return params_.emplace(name, Param{std::move(init), std::move(grad)}).first->second;
}

Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw StructuralError("unknown parameter '" + name + "'");
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw StructuralError("unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

const Matrix& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Param& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Param* target = &p;
  nodes_.push_back(Node{p.value, Matrix(), [target](Tape&, const Matrix& g) {
                          if (target->grad.size() != g.size())
                            target->grad.setZero(g.rows(), g.cols());
                          target->grad += g;
                        },
                        true});
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_[&p] = id;
  return Var(this, id);
}

Var Tape::record(Matrix value, std::vector<int> parents, Backward backward) {
  bool needs = false;
  for (int p : parents) needs |= nodes_[p].needs_grad;
  if (!value.allFinite()) throw NumericError("non-finite value recorded on tape");
  nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Matrix& grad) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0)
    n.grad = grad;
  else
    n.grad += grad;
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw StateError("backward on a foreign tape");
  nodes_[root.id()].grad = Matrix::Ones(root.rows(), root.cols());
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
    const Matrix g = std::move(n.grad);
    n.grad = Matrix();
    n.backward(*this, g);
  }
}

void Tape::record_kinks(const Matrix& pre, double lo, double hi) {
  const auto old = kinks_.size();
  kinks_.resize(old + static_cast<std::size_t>(pre.size()));
  for (Eigen::Index i = 0; i < pre.size(); ++i) {
    const double v = pre.data()[i];
    kinks_[old + static_cast<std::size_t>(i)] = v < lo ? 0 : (v > hi ? 2 : 1);
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw StructuralError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()));
}

Tape& tape_of(const Var& a) {
  if (!a.tape()) throw StateError("operation on an unbound Var");
  return *a.tape();
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var operator+(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var operator-(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var operator*(double s, const Var& a) {
  const int ia = a.id();
  return tape_of(a).record(s * a.value(), {ia},
                           [ia, s](Tape& t, const Matrix& g) { t.accumulate(ia, s * g); });
}

Var add_scalar(const Var& a, double c) {
  const int ia = a.id();
  return tape_of(a).record(a.value().array() + c, {ia},
                           [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}

Var cwise_mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "cwise_mul");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(a.value().cwiseProduct(b.value()), {ia, ib},
                           [ia, ib](Tape& t, const Matrix& g) {
                             if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                             if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                           });
}

Var cwise_div(const Var& a, const Var& b) {
  require_same_shape(a, b, "cwise_div");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(
      a.value().cwiseQuotient(b.value()), {ia, ib}, [ia, ib](Tape& t, const Matrix& g) {
        const Matrix& bv = t.value(ib);
        if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseQuotient(bv));
        if (t.needs_grad(ib))
          t.accumulate(ib, (-g.array() * t.value(ia).array() / bv.array().square()).matrix());
      });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw StructuralError("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                          std::to_string(b.rows()));
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_transposed(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw StructuralError("matmul_transposed: column mismatch");
  const int ia = a.id(), ib = b.id();
  return tape_of(a).record(a.value() * b.value().transpose(), {ia, ib},
                           [ia, ib](Tape& t, const Matrix& g) {
                             if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib));
                             if (t.needs_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
                           });
}

Var spmm(const SparseMatrix& s, const Var& x) {
  if (s.cols() != x.rows()) throw StructuralError("spmm: dimension mismatch");
  auto held = std::make_shared<const SparseMatrix>(s);
  const int ix = x.id();
  Matrix value = s * x.value();
  return tape_of(x).record(std::move(value), {ix}, [ix, held](Tape& t, const Matrix& g) {
    t.accumulate(ix, held->transpose() * g);
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw StructuralError("add_row: bad row shape");
  const int ia = a.id(), ir = row.id();
  Matrix value = a.value().rowwise() + row.value().row(0);
  return tape_of(a).record(std::move(value), {ia, ir}, [ia, ir](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

Var relu(const Var& a) {
  Tape& tape = tape_of(a);
  tape.record_kinks(a.value(), 0.0, 0.0);
  const int ia = a.id();
  return tape.record(a.value().cwiseMax(0.0), {ia}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() > 0.0).select(g.array(), 0.0).matrix());
  });
}

Var sigmoid(const Var& a) {
  const int ia = a.id();
  Matrix s = a.value().unaryExpr(&stable_sigmoid);
  const int out = static_cast<int>(tape_of(a).size());
  return tape_of(a).record(std::move(s), {ia}, [ia, out](Tape& t, const Matrix& g) {
    const Matrix& sv = t.value(out);
    t.accumulate(ia, (g.array() * sv.array() * (1.0 - sv.array())).matrix());
  });
}

Var log_sigmoid(const Var& a) {
  const int ia = a.id();
  Matrix v = a.value().unaryExpr(
      [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); });
  return tape_of(a).record(std::move(v), {ia}, [ia](Tape& t, const Matrix& g) {
    const Matrix d = t.value(ia).unaryExpr([](double x) { return 1.0 - stable_sigmoid(x); });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

Var exp(const Var& a) {
  const int ia = a.id();
  const int out = static_cast<int>(tape_of(a).size());
  return tape_of(a).record(a.value().array().exp().matrix(), {ia},
                           [ia, out](Tape& t, const Matrix& g) {
                             t.accumulate(ia, g.cwiseProduct(t.value(out)));
                           });
}

Var log(const Var& a) {
  if ((a.value().array() <= 0.0).any()) throw NumericError("log of non-positive value");
  const int ia = a.id();
  return tape_of(a).record(a.value().array().log().matrix(), {ia},
                           [ia](Tape& t, const Matrix& g) {
                             t.accumulate(ia, g.cwiseQuotient(t.value(ia)));
                           });
}

Var square(const Var& a) {
  const int ia = a.id();
  return tape_of(a).record(a.value().array().square().matrix(), {ia},
                           [ia](Tape& t, const Matrix& g) {
                             t.accumulate(ia, 2.0 * g.cwiseProduct(t.value(ia)));
                           });
}

Var clamp(const Var& a, double lo, double hi) {
  Tape& tape = tape_of(a);
  tape.record_kinks(a.value(), lo, hi);
  const int ia = a.id();
  return tape.record(a.value().cwiseMax(lo).cwiseMin(hi), {ia},
                     [ia, lo, hi](Tape& t, const Matrix& g) {
                       const auto& x = t.value(ia).array();
                       t.accumulate(ia, ((x > lo) && (x < hi)).select(g.array(), 0.0).matrix());
                     });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw StructuralError("concat_cols: no parts");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw StructuralError("concat_cols: row mismatch");
    cols += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Matrix value(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    value.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return tape_of(parts.front())
      .record(std::move(value), ids, [ids, widths](Tape& t, const Matrix& g) {
        Eigen::Index off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.needs_grad(ids[k])) t.accumulate(ids[k], g.middleCols(off, widths[k]));
          off += widths[k];
        }
      });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw StructuralError("slice_cols: out of range");
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return tape_of(a).record(a.value().middleCols(start, count), {ia},
                           [ia, rows, cols, start, count](Tape& t, const Matrix& g) {
                             Matrix full = Matrix::Zero(rows, cols);
                             full.middleCols(start, count) = g;
                             t.accumulate(ia, full);
                           });
}

Var gather_rows(const Var& a, const std::vector<int>& rows) {
  const Eigen::Index n = a.rows();
  Matrix value(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= n) throw StructuralError("gather_rows: index out of range");
    value.row(static_cast<Eigen::Index>(k)) = a.value().row(rows[k]);
  }
  const int ia = a.id();
  return tape_of(a).record(std::move(value), {ia}, [ia, rows, n](Tape& t, const Matrix& g) {
    Matrix acc = Matrix::Zero(n, g.cols());
    for (std::size_t k = 0; k < rows.size(); ++k)
      acc.row(rows[k]) += g.row(static_cast<Eigen::Index>(k));
    t.accumulate(ia, acc);
  });
}

Var sum(const Var& a) {
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return tape_of(a).record(std::move(v), {ia}, [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw StructuralError("mean of empty tensor");
  return (1.0 / static_cast<double>(a.value().size())) * sum(a);
}

Var row_sum(const Var& a) {
  const int ia = a.id();
  const Eigen::Index c = a.cols();
  return tape_of(a).record(a.value().rowwise().sum(), {ia}, [ia, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.replicate(1, c));
  });
}

Var masked_sum(const Var& a, const Matrix& weights) {
  if (weights.rows() != a.rows() || weights.cols() != a.cols())
    throw StructuralError("masked_sum: weight shape mismatch");
  const int ia = a.id();
  Matrix v(1, 1);
  v(0, 0) = a.value().cwiseProduct(weights).sum();
  return tape_of(a).record(std::move(v), {ia}, [ia, weights](Tape& t, const Matrix& g) {
    t.accumulate(ia, g(0, 0) * weights);
  });
}

Var row_normalize(const Var& a, double floor) {
  const int ia = a.id();
  const Vector norms = a.value().rowwise().norm().cwiseMax(floor);
  Matrix y = norms.cwiseInverse().asDiagonal() * a.value();
  const int out = static_cast<int>(tape_of(a).size());
  return tape_of(a).record(std::move(y), {ia}, [ia, out, norms](Tape& t, const Matrix& g) {
    const Matrix& yv = t.value(out);
    const Vector dots = yv.cwiseProduct(g).rowwise().sum();
    Matrix d = g - dots.asDiagonal() * yv;
    t.accumulate(ia, norms.cwiseInverse().asDiagonal() * d);
  });
}

Var log_softmax_rows(const Var& a) {
  const int ia = a.id();
  const Matrix& x = a.value();
  const Vector mx = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - mx;
  const Vector lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix y = shifted.colwise() - lse;
  const int out = static_cast<int>(tape_of(a).size());
  return tape_of(a).record(std::move(y), {ia}, [ia, out](Tape& t, const Matrix& g) {
    const Matrix p = t.value(out).array().exp().matrix();
    const Vector gs = g.rowwise().sum();
    t.accumulate(ia, g - gs.asDiagonal() * p);
  });
}

}  // namespace openx

#pragma once

#include "openx/graph.hpp"

#include <Eigen/SparseCore>

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace openx {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Trainable tensor with a gradient buffer of identical shape.
struct Param {
  Matrix value;
  Matrix grad;
};

class ParamStore {
 public:
  Param& add(const std::string& name, Matrix init);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  void zero_grad();
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Param> params_;
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  const Matrix& value() const;
  double scalar() const { return value()(0, 0); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode recorder. Nodes are appended in evaluation order, so a single
// backward sweep in reverse visits each node exactly once.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Var constant(Matrix value);
  // Leaf bound to a ParamStore entry; backward adds into `p.grad`. Repeated
  // calls with the same Param return the same node.
  Var param(Param& p);
  Var record(Matrix value, std::vector<int> parents, Backward backward);

  const Matrix& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  void accumulate(int id, const Matrix& grad);
  void backward(const Var& root);
  std::size_t size() const { return nodes_.size(); }

  // Sign pattern of every rectifier/clamp input recorded so far. Finite
  // differences that change the pattern straddle a kink.
  void record_kinks(const Matrix& pre, double lo, double hi);
  const std::vector<std::uint8_t>& kinks() const { return kinks_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
  };
  std::deque<Node> nodes_;
  std::map<const Param*, int> param_nodes_;
  std::vector<std::uint8_t> kinks_;
};

// Elementwise and shape ops. Binary ops require equal shapes unless noted.
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(double s, const Var& a);
Var add_scalar(const Var& a, double c);
Var cwise_mul(const Var& a, const Var& b);
Var cwise_div(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var matmul_transposed(const Var& a, const Var& b);  // a * b^T
Var spmm(const SparseMatrix& s, const Var& x);
Var add_row(const Var& a, const Var& row);  // broadcasts a 1xC row over every row of a
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var log_sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var clamp(const Var& a, double lo, double hi);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& a, const std::vector<int>& rows);
Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);
Var masked_sum(const Var& a, const Matrix& weights);  // sum(a .* weights)
Var row_normalize(const Var& a, double floor = 1e-12);
Var log_softmax_rows(const Var& a);

}  // namespace openx

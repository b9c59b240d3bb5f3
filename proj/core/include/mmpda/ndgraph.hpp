#pragma once

// Dense double-precision tensors with define-by-run reverse-mode
// differentiation. A Graph is rebuilt for every evaluation; parameters live
// outside the graph in Tensors and are bound to it as leaves, so gradients
// accumulate into the owning Tensor when Graph::backward runs.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmpda::nd {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

// Row-major tensor of rank 1 or 2. Rank-1 tensors of length k behave as 1xk
// rows in matrix primitives.
class Tensor {
 public:
  Tensor() : Tensor(Shape{1, 1}) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor vector(std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : shape_[0]; }
  std::size_t cols() const { return rank() == 1 ? shape_[0] : shape_[1]; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);
  // Empty unless requires_grad().
  std::span<const double> grad() const { return grad_; }
  std::span<double> grad() { return grad_; }
  void zero_grad();

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::vector<double> grad_;
};

class Graph;

// Handle to a node of a Graph. Cheap to copy; it and references to its value
// stay valid while the Graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  // Value of a single-element node.
  double item() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Graph& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// What a primitive's backward rule sees. `in_grad[k]` is null when input k
// does not lead to any differentiable leaf.
struct BackwardArgs {
  std::span<const double> out_grad;
  const Tensor& out;
  std::vector<const Tensor*> in;
  std::vector<std::span<double>> in_grad;

  bool wants(std::size_t k) const { return !in_grad[k].empty(); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(const BackwardArgs&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf that never receives gradient.
  Var constant(Tensor value);
  // Leaf bound to an externally owned tensor. When `bound.requires_grad()`,
  // backward accumulates d(root)/d(bound) into bound.grad().
  Var param(Tensor& bound);

  // Appends a node. Inputs must already belong to this graph. Used by the
  // primitive implementations.
  Var record(std::string_view op, std::vector<Var> inputs, Tensor value,
             BackwardFn backward);

  // Reverse sweep from a single-element root over nodes in reverse insertion
  // order. Each call recomputes node adjoints from scratch and accumulates
  // leaf gradients into their bound tensors.
  void backward(Var root);

  // Adjoint of `v` from the most recent backward(); empty if `v` was not on a
  // differentiable path.
  std::span<const double> adjoint(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(Var v) const { return nodes_.at(v.id()).op; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

 private:
  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool needs_grad = false;
    Tensor* bound = nullptr;
    BackwardFn backward;
  };

  // A deque keeps references from Var::value() valid as nodes are appended.
  std::deque<Node> nodes_;
  std::vector<std::vector<double>> adjoints_;
};

// ---- primitives -----------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// a (n x k) plus a 1 x k row broadcast over rows.
Var add_row(Var a, Var row);
// a (n x k) times an n x 1 column broadcast over columns.
Var mul_col(Var a, Var col);
Var scale(Var a, double s);
Var add_scalar(Var a, double c);
// Column sums, 1 x k (the 1^T A product).
Var sum_rows(Var a);
// Row sums, n x 1.
Var sum_cols(Var a);
Var sum(Var a);
Var mean(Var a);
Var log(Var a);
Var exp(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var frobenius_sq(Var a);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
// Row-wise outer product: out[r, i * q + j] = a[r, i] * b[r, j].
Var outer_rows(Var a, Var b);
Var gather_rows(Var a, const std::vector<std::size_t>& rows);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
// Elementwise clamp; gradient passes only where the input is inside [lo, hi].
Var clamp(Var a, double lo, double hi);
Var stop_gradient(Var a);
// Identity forward; backward multiplies the upstream gradient by -s.
Var grad_reverse(Var a, double s);

// ---- verification ---------------------------------------------------------

using ScalarFn = std::function<Var(Graph&, Var)>;

// Max over coordinates of |analytic - central difference| /
// max(1, |central difference|) for the scalar function f at x.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h);

// Same check over every coordinate of a set of externally owned parameter
// tensors; `f` must bind them with Graph::param.
double finite_diff_check_params(const std::function<Var(Graph&)>& f,
                                const std::vector<Tensor*>& params, double h);

}  // namespace mmpda::nd

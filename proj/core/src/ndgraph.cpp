#include "mmpda/ndgraph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

#include "mmpda/errors.hpp"

namespace mmpda::nd {

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

std::size_t product(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void check_rank(const Shape& shape) {
  if (shape.empty() || shape.size() > 2) {
    throw ShapeError("tensor: rank must be 1 or 2, got shape " +
                     to_string(shape));
  }
}

[[noreturn]] void shape_mismatch(std::string_view op, const Tensor& a,
                                 const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " +
                   to_string(a.shape()) + " vs " + to_string(b.shape()));
}

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch(op, a, b);
}

void require_finite(std::string_view op, const Tensor& t) {
  if (!t.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite input");
  }
}

Tensor matrix_of(std::size_t rows, std::size_t cols) {
  return Tensor(Shape{rows, cols});
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {
  check_rank(shape_);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_rank(shape_);
  if (product(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " needs " +
                     std::to_string(product(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::matrix(
    std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1, 1}, value); }

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on) {
    grad_.assign(data_.size(), 0.0);
  } else {
    grad_.clear();
  }
}

void Tensor::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

// ---- Var / Graph ----------------------------------------------------------

const Tensor& Var::value() const { return graph_->value(id_); }

double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) {
    throw ContractError("item: tensor of shape " + to_string(v.shape()) +
                        " is not a scalar");
  }
  return v[0];
}

Var Graph::constant(Tensor value) {
  Node node;
  node.op = "constant";
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(Tensor& bound) {
  Node node;
  node.op = "param";
  node.value = Tensor(bound.shape(), bound.values());
  node.needs_grad = bound.requires_grad();
  node.bound = &bound;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(std::string_view op, std::vector<Var> inputs, Tensor value,
                  BackwardFn backward) {
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.graph_ != this || in.id_ >= nodes_.size()) {
      throw ContractError(std::string(op) + ": input from another graph");
    }
    node.inputs.push_back(in.id_);
    node.needs_grad = node.needs_grad || nodes_[in.id_].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var root) {
  if (root.graph_ != this || root.id_ >= nodes_.size()) {
    throw ContractError("backward: root does not belong to this graph");
  }
  if (nodes_[root.id_].value.size() != 1) {
    throw ContractError("backward: root must be a scalar, got shape " +
                        to_string(nodes_[root.id_].value.shape()));
  }
  adjoints_.assign(nodes_.size(), {});
  adjoints_[root.id_].assign(1, 1.0);

  for (std::size_t id = root.id_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.needs_grad || adjoints_[id].empty()) continue;
    if (node.bound != nullptr) {
      auto g = node.bound->grad();
      const auto& adj = adjoints_[id];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += adj[i];
      continue;
    }
    if (!node.backward) continue;

    std::vector<const Tensor*> in;
    std::vector<std::span<double>> in_grad;
    in.reserve(node.inputs.size());
    in_grad.reserve(node.inputs.size());
    for (std::size_t input : node.inputs) {
      in.push_back(&nodes_[input].value);
      if (nodes_[input].needs_grad) {
        auto& adj = adjoints_[input];
        if (adj.empty()) adj.assign(nodes_[input].value.size(), 0.0);
        in_grad.emplace_back(adj);
      } else {
        in_grad.emplace_back();
      }
    }
    node.backward(BackwardArgs{adjoints_[id], node.value, std::move(in),
                               std::move(in_grad)});
  }
}

std::span<const double> Graph::adjoint(Var v) const {
  if (v.id_ >= adjoints_.size()) return {};
  return adjoints_[v.id_];
}

// ---- primitives -----------------------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) shape_mismatch("matmul", A, B);
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor out = matrix_of(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += aip * B[p * m + j];
    }
  }
  return a.graph().record(
      "matmul", {a, b}, std::move(out), [n, k, m](const BackwardArgs& g) {
        const Tensor& A = *g.in[0];
        const Tensor& B = *g.in[1];
        if (g.wants(0)) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < m; ++j)
                acc += g.out_grad[i * m + j] * B[p * m + j];
              g.in_grad[0][i * k + p] += acc;
            }
        }
        if (g.wants(1)) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              if (aip == 0.0) continue;
              for (std::size_t j = 0; j < m; ++j)
                g.in_grad[1][p * m + j] += aip * g.out_grad[i * m + j];
            }
        }
      });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out = matrix_of(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return a.graph().record("transpose", {a}, std::move(out),
                          [r, c](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j)
                                g.in_grad[0][i * c + j] += g.out_grad[j * r + i];
                          });
}

Var add(Var a, Var b) {
  require_same("add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.graph().record("add", {a, b}, std::move(out),
                          [](const BackwardArgs& g) {
                            for (std::size_t k = 0; k < 2; ++k) {
                              if (!g.wants(k)) continue;
                              for (std::size_t i = 0; i < g.out_grad.size(); ++i)
                                g.in_grad[k][i] += g.out_grad[i];
                            }
                          });
}

Var sub(Var a, Var b) {
  require_same("sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.graph().record("sub", {a, b}, std::move(out),
                          [](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.out_grad.size(); ++i) {
                              if (g.wants(0)) g.in_grad[0][i] += g.out_grad[i];
                              if (g.wants(1)) g.in_grad[1][i] -= g.out_grad[i];
                            }
                          });
}

Var mul(Var a, Var b) {
  require_same("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.graph().record(
      "mul", {a, b}, std::move(out), [](const BackwardArgs& g) {
        for (std::size_t i = 0; i < g.out_grad.size(); ++i) {
          if (g.wants(0)) g.in_grad[0][i] += g.out_grad[i] * (*g.in[1])[i];
          if (g.wants(1)) g.in_grad[1][i] += g.out_grad[i] * (*g.in[0])[i];
        }
      });
}

Var add_row(Var a, Var row) {
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  if (R.rows() != 1 || R.cols() != A.cols()) shape_mismatch("add_row", A, R);
  const std::size_t n = A.rows(), k = A.cols();
  Tensor out = A;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] += R[j];
  return a.graph().record("add_row", {a, row}, std::move(out),
                          [n, k](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < k; ++j) {
                                const double go = g.out_grad[i * k + j];
                                if (g.wants(0)) g.in_grad[0][i * k + j] += go;
                                if (g.wants(1)) g.in_grad[1][j] += go;
                              }
                          });
}

Var mul_col(Var a, Var col) {
  const Tensor& A = a.value();
  const Tensor& C = col.value();
  if (C.cols() != 1 || C.rows() != A.rows()) shape_mismatch("mul_col", A, C);
  const std::size_t n = A.rows(), k = A.cols();
  Tensor out = A;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] *= C[i];
  return a.graph().record(
      "mul_col", {a, col}, std::move(out), [n, k](const BackwardArgs& g) {
        const Tensor& A = *g.in[0];
        const Tensor& C = *g.in[1];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const double go = g.out_grad[i * k + j];
            if (g.wants(0)) g.in_grad[0][i * k + j] += go * C[i];
            if (g.wants(1)) g.in_grad[1][i] += go * A[i * k + j];
          }
      });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.graph().record("scale", {a}, std::move(out),
                          [s](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.out_grad.size(); ++i)
                              g.in_grad[0][i] += s * g.out_grad[i];
                          });
}

Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += c;
  return a.graph().record("add_scalar", {a}, std::move(out),
                          [](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.out_grad.size(); ++i)
                              g.in_grad[0][i] += g.out_grad[i];
                          });
}

Var sum_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), k = A.cols();
  Tensor out = matrix_of(1, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[j] += A[i * k + j];
  return a.graph().record("sum_rows", {a}, std::move(out),
                          [n, k](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < k; ++j)
                                g.in_grad[0][i * k + j] += g.out_grad[j];
                          });
}

Var sum_cols(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), k = A.cols();
  Tensor out = matrix_of(n, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i] += A[i * k + j];
  return a.graph().record("sum_cols", {a}, std::move(out),
                          [n, k](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < k; ++j)
                                g.in_grad[0][i * k + j] += g.out_grad[i];
                          });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.graph().record("sum", {a}, Tensor::scalar(total),
                          [](const BackwardArgs& g) {
                            for (auto& v : g.in_grad[0]) v += g.out_grad[0];
                          });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const double inv = 1.0 / static_cast<double>(n);
  return a.graph().record("mean", {a}, Tensor::scalar(total * inv),
                          [inv](const BackwardArgs& g) {
                            for (auto& v : g.in_grad[0]) v += g.out_grad[0] * inv;
                          });
}

Var log(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) {
    if (!std::isfinite(v) || v <= 0.0) {
      throw NumericError("log: input outside (0, inf)");
    }
    v = std::log(v);
  }
  return a.graph().record("log", {a}, std::move(out),
                          [](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.out_grad.size(); ++i)
                              g.in_grad[0][i] += g.out_grad[i] / (*g.in[0])[i];
                          });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) {
    v = std::exp(v);
    if (!std::isfinite(v)) throw NumericError("exp: result not finite");
  }
  return a.graph().record("exp", {a}, std::move(out),
                          [](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.out_grad.size(); ++i)
                              g.in_grad[0][i] += g.out_grad[i] * g.out[i];
                          });
}

namespace {
double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var a) {
  require_finite("sigmoid", a.value());
  Tensor out = a.value();
  for (auto& v : out.data()) v = logistic(v);
  return a.graph().record("sigmoid", {a}, std::move(out),
                          [](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.out_grad.size(); ++i) {
                              const double s = g.out[i];
                              g.in_grad[0][i] += g.out_grad[i] * s * (1.0 - s);
                            }
                          });
}

Var tanh(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return a.graph().record("tanh", {a}, std::move(out),
                          [](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.out_grad.size(); ++i) {
                              const double t = g.out[i];
                              g.in_grad[0][i] += g.out_grad[i] * (1.0 - t * t);
                            }
                          });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.graph().record("relu", {a}, std::move(out),
                          [](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.out_grad.size(); ++i)
                              if ((*g.in[0])[i] > 0.0)
                                g.in_grad[0][i] += g.out_grad[i];
                          });
}

Var softmax_rows(Var a) {
  const Tensor& A = a.value();
  require_finite("softmax_rows", A);
  const std::size_t n = A.rows(), k = A.cols();
  Tensor out = matrix_of(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = A[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, A[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = std::exp(A[i * k + j] - mx);
      z += out[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= z;
  }
  return a.graph().record(
      "softmax_rows", {a}, std::move(out), [n, k](const BackwardArgs& g) {
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < k; ++j)
            dot += g.out_grad[i * k + j] * g.out[i * k + j];
          for (std::size_t j = 0; j < k; ++j)
            g.in_grad[0][i * k + j] +=
                g.out[i * k + j] * (g.out_grad[i * k + j] - dot);
        }
      });
}

Var log_softmax_rows(Var a) {
  const Tensor& A = a.value();
  require_finite("log_softmax_rows", A);
  const std::size_t n = A.rows(), k = A.cols();
  Tensor out = matrix_of(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = A[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, A[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(A[i * k + j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = A[i * k + j] - lz;
  }
  return a.graph().record(
      "log_softmax_rows", {a}, std::move(out), [n, k](const BackwardArgs& g) {
        for (std::size_t i = 0; i < n; ++i) {
          double total = 0.0;
          for (std::size_t j = 0; j < k; ++j) total += g.out_grad[i * k + j];
          for (std::size_t j = 0; j < k; ++j)
            g.in_grad[0][i * k + j] +=
                g.out_grad[i * k + j] - std::exp(g.out[i * k + j]) * total;
        }
      });
}

Var frobenius_sq(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v * v;
  return a.graph().record("frobenius_sq", {a}, Tensor::scalar(total),
                          [](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.in[0]->size(); ++i)
                              g.in_grad[0][i] += 2.0 * (*g.in[0])[i] * g.out_grad[0];
                          });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != n) shape_mismatch("concat_cols", parts.front().value(), p.value());
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out = matrix_of(n, total);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& P = p.value();
    const std::size_t w = P.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offset + j] = P[i * w + j];
    offset += w;
  }
  return parts.front().graph().record(
      "concat_cols", parts, std::move(out),
      [n, total, widths](const BackwardArgs& g) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const std::size_t w = widths[k];
          if (g.wants(k)) {
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < w; ++j)
                g.in_grad[k][i * w + j] += g.out_grad[i * total + offset + j];
          }
          offset += w;
        }
      });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t k = parts.front().cols();
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != k) shape_mismatch("concat_rows", parts.front().value(), p.value());
    sizes.push_back(p.value().size());
    rows += p.rows();
  }
  Tensor out = matrix_of(rows, k);
  auto dst = out.data().begin();
  for (const Var& p : parts) dst = std::copy(p.value().data().begin(), p.value().data().end(), dst);
  return parts.front().graph().record(
      "concat_rows", parts, std::move(out), [sizes](const BackwardArgs& g) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
          if (g.wants(i))
            for (std::size_t j = 0; j < sizes[i]; ++j)
              g.in_grad[i][j] += g.out_grad[offset + j];
          offset += sizes[i];
        }
      });
}

Var outer_rows(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rows() != B.rows()) shape_mismatch("outer_rows", A, B);
  const std::size_t n = A.rows(), p = A.cols(), q = B.cols();
  Tensor out = matrix_of(n, p * q);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j)
        out[r * p * q + i * q + j] = A[r * p + i] * B[r * q + j];
  return a.graph().record(
      "outer_rows", {a, b}, std::move(out), [n, p, q](const BackwardArgs& g) {
        const Tensor& A = *g.in[0];
        const Tensor& B = *g.in[1];
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) {
              const double go = g.out_grad[r * p * q + i * q + j];
              if (g.wants(0)) g.in_grad[0][r * p + i] += go * B[r * q + j];
              if (g.wants(1)) g.in_grad[1][r * q + j] += go * A[r * p + i];
            }
      });
}

Var gather_rows(Var a, const std::vector<std::size_t>& rows) {
  const Tensor& A = a.value();
  const std::size_t k = A.cols();
  Tensor out = matrix_of(rows.size(), k);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= A.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[r]) +
                       " out of range for shape " + to_string(A.shape()));
    }
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = A[rows[r] * k + j];
  }
  return a.graph().record("gather_rows", {a}, std::move(out),
                          [rows, k](const BackwardArgs& g) {
                            for (std::size_t r = 0; r < rows.size(); ++r)
                              for (std::size_t j = 0; j < k; ++j)
                                g.in_grad[0][rows[r] * k + j] += g.out_grad[r * k + j];
                          });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& A = a.value();
  if (begin + count > A.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for shape " +
                     to_string(A.shape()));
  }
  const std::size_t n = A.rows(), k = A.cols();
  Tensor out = matrix_of(n, count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = A[i * k + begin + j];
  return a.graph().record("slice_cols", {a}, std::move(out),
                          [n, k, begin, count](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < count; ++j)
                                g.in_grad[0][i * k + begin + j] +=
                                    g.out_grad[i * count + j];
                          });
}

Var clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo must not exceed hi");
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::clamp(v, lo, hi);
  return a.graph().record("clamp", {a}, std::move(out),
                          [lo, hi](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.out_grad.size(); ++i) {
                              const double x = (*g.in[0])[i];
                              if (x >= lo && x <= hi) g.in_grad[0][i] += g.out_grad[i];
                            }
                          });
}

Var stop_gradient(Var a) {
  // A constant copy: nothing upstream is reachable through it.
  return a.graph().constant(a.value());
}

Var grad_reverse(Var a, double s) {
  if (!std::isfinite(s)) throw NumericError("grad_reverse: scale not finite");
  return a.graph().record("grad_reverse", {a}, a.value(),
                          [s](const BackwardArgs& g) {
                            for (std::size_t i = 0; i < g.out_grad.size(); ++i)
                              g.in_grad[0][i] += -s * g.out_grad[i];
                          });
}

// ---- verification ---------------------------------------------------------

namespace {

double evaluate_scalar(const std::function<Var(Graph&)>& f) {
  Graph g;
  const double v = f(g).item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: f not finite");
  return v;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

}  // namespace

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  Tensor probe = x;
  probe.set_requires_grad(true);
  return finite_diff_check_params(
      [&](Graph& g) { return f(g, g.param(probe)); }, {&probe}, h);
}

double finite_diff_check_params(const std::function<Var(Graph&)>& f,
                                const std::vector<Tensor*>& params, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: h must be positive");
  for (Tensor* p : params) {
    if (!p->requires_grad()) p->set_requires_grad(true);
    p->zero_grad();
  }
  {
    Graph g;
    Var root = f(g);
    if (!std::isfinite(root.item())) {
      throw NumericError("finite_diff_check: f not finite");
    }
    g.backward(root);
  }
  double worst = 0.0;
  for (Tensor* p : params) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double saved = (*p)[i];
      (*p)[i] = saved + h;
      const double up = evaluate_scalar(f);
      (*p)[i] = saved - h;
      const double down = evaluate_scalar(f);
      (*p)[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, relative_error(p->grad()[i], numeric));
    }
  }
  return worst;
}

}  // namespace mmpda::nd

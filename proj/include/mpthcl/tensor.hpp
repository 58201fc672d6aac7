#pragma once

// Dense f64 tensors with tape-free reverse-mode differentiation: every
// result holds shared pointers to its inputs plus a closure that pushes its
// gradient back to them. Ranks 0, 1 and 2 are supported; a rank-1 tensor
// of extent n behaves as a 1 x n row wherever broadcasting is involved.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mpthcl/rng.hpp"

namespace mpthcl {

/// Inputs or attributes that do not fit an operation's signature.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A primitive produced NaN or Inf, or training diverged.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto e : shape)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::vector<double> data;
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data), requires_grad);
  }
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false) {
    return Tensor({values.size()}, std::vector<double>(values), requires_grad);
  }
  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  /// Row count under the 2-D view (rank < 2 counts as one row).
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<const double> data() const { return node_->data; }
  /// In-place access for optimizers and finite differencing; bypasses the graph.
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on && node_->is_leaf) node_->ensure_grad();
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

  /// Same values, no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }
  const char* op() const { return node_->op; }
  bool is_leaf() const { return node_->is_leaf; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Graph traversal and backward pass

/// Nodes reachable from a root through gradient-carrying edges, inputs first.
struct ComputeGraph {
  std::vector<detail::Node*> nodes;
  std::vector<detail::Node*> leaves;
};

inline ComputeGraph trace(const Tensor& root) {
  ComputeGraph g;
  if (!root.defined() || !root.requires_grad()) return g;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    g.nodes.push_back(node);
    if (node->is_leaf) g.leaves.push_back(node);
    stack.pop_back();
  }
  return g;
}

/// Accumulates d(root)/d(leaf) into every gradient-requiring leaf. Leaf
/// gradients add up across calls; call zero_grad() between steps.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1)
    throw ShapeError("backward requires a scalar root, got shape " +
                     (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
  if (!root.requires_grad()) return;
  const ComputeGraph g = trace(root);
  for (auto* n : g.nodes)
    if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0);
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->is_leaf && n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Primitive plumbing

namespace detail {

inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs, std::function<void(Node&)> bw) {
  for (double v : data)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite output in primitive '") + op + "'");
  Tensor out(std::move(shape), std::move(data), false);
  Node* n = out.node();
  n->op = op;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    n->is_leaf = false;
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node_ptr());
    n->backward = std::move(bw);
  }
  return out;
}

// Accumulation target for parent k, or nullptr when it takes no gradient.
inline double* parent_grad(Node& self, std::size_t k) {
  Node* p = self.parents[k].get();
  return p->requires_grad ? p->ensure_grad().data() : nullptr;
}

inline void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined input");
}

inline void require_rank2(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline void require_axis(const Tensor& t, std::size_t axis, const char* op) {
  if (axis >= std::max<std::size_t>(t.rank(), 1) || (t.rank() == 0 && axis != 0))
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " invalid for shape " + shape_str(t.shape()));
}

struct Broadcast {
  std::size_t rows, cols;
  std::size_t ar, ac, br, bc;
  Shape shape;
};

inline Broadcast broadcast_shapes(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast bc{};
  bc.ar = a.rows();
  bc.ac = a.cols();
  bc.br = b.rows();
  bc.bc = b.cols();
  auto merge = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": cannot broadcast shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  };
  if (a.rank() > 2 || b.rank() > 2)
    throw ShapeError(std::string(op) + ": rank above 2 unsupported");
  bc.rows = merge(bc.ar, bc.br);
  bc.cols = merge(bc.ac, bc.bc);
  const std::size_t r = std::max(a.rank(), b.rank());
  if (r == 2)
    bc.shape = {bc.rows, bc.cols};
  else if (r == 1)
    bc.shape = {bc.cols};
  return bc;
}

// Iterates independent 1-D lines of a rank <= 2 tensor along `axis`.
struct Lines {
  std::size_t count, length, stride, step;  // line k starts at k * step
};

inline Lines lines_along(const Tensor& t, std::size_t axis) {
  if (t.rank() <= 1) return {1, t.numel(), 1, 0};
  const std::size_t r = t.dim(0), c = t.dim(1);
  if (axis == 1) return {r, c, 1, c};
  return {c, r, c, 1};
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  require_defined(x, op);
  std::vector<double> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xs[i]);
  return make_result(op, x.shape(), std::move(y), {x}, [deriv](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xin = self.parents[0]->data;
    for (std::size_t i = 0; i < self.data.size(); ++i)
      gx[i] += self.grad[i] * deriv(xin[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> c(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aip * B[p * n + j];
    }
  return detail::make_result("matmul", {m, n}, std::move(c), {a, b}, [m, k, n](detail::Node& self) {
    const auto& A = self.parents[0]->data;
    const auto& B = self.parents[1]->data;
    const auto& G = self.grad;
    if (double* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          ga[i * k + p] += acc;
        }
    if (double* gb = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * G[i * n + j];
        }
  });
}

namespace detail {

template <class Combine, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Combine f, DA da, DB db) {
  require_defined(a, op);
  require_defined(b, op);
  const Broadcast bc = broadcast_shapes(a, b, op);
  const auto A = a.data();
  const auto B = b.data();
  auto ia = [bc](std::size_t i, std::size_t j) {
    return (bc.ar == 1 ? 0 : i) * bc.ac + (bc.ac == 1 ? 0 : j);
  };
  auto ib = [bc](std::size_t i, std::size_t j) {
    return (bc.br == 1 ? 0 : i) * bc.bc + (bc.bc == 1 ? 0 : j);
  };
  std::vector<double> y(bc.rows * bc.cols);
  for (std::size_t i = 0; i < bc.rows; ++i)
    for (std::size_t j = 0; j < bc.cols; ++j) y[i * bc.cols + j] = f(A[ia(i, j)], B[ib(i, j)]);
  return make_result(op, bc.shape, std::move(y), {a, b}, [bc, ia, ib, da, db](Node& self) {
    const auto& A = self.parents[0]->data;
    const auto& B = self.parents[1]->data;
    double* ga = parent_grad(self, 0);
    double* gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < bc.rows; ++i)
      for (std::size_t j = 0; j < bc.cols; ++j) {
        const double g = self.grad[i * bc.cols + j];
        const double x = A[ia(i, j)], z = B[ib(i, j)];
        if (ga) ga[ia(i, j)] += g * da(x, z);
        if (gb) gb[ib(i, j)] += g * db(x, z);
      }
  });
}

}  // namespace detail

/// Elementwise sum; either operand may broadcast along extent-1 axes.
inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(
      "scale", x, [factor](double v) { return factor * v; },
      [factor](double, double) { return factor; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

/// Subgradient at 0 is the negative-side slope (0).
inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

/// Subgradient at 0 is `slope`.
inline Tensor leaky_relu(const Tensor& x, double slope) {
  return detail::unary(
      "leaky_relu", x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank2(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> y(r * c);
  const auto X = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = X[i * c + j];
  return detail::make_result("transpose", {c, r}, std::move(y), {x}, [r, c](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j * r + i];
  });
}

/// Joins matrices along rows (axis 0) or columns (axis 1); rank-1 inputs
/// join along axis 0.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) detail::require_defined(p, "concat");
  const Tensor& first = parts.front();
  detail::require_axis(first, axis, "concat");
  if (first.rank() == 0) throw ShapeError("concat: scalar inputs");
  for (const auto& p : parts) {
    bool ok = p.rank() == first.rank();
    if (ok && first.rank() == 2) ok = axis == 0 ? p.dim(1) == first.dim(1) : p.dim(0) == first.dim(0);
    if (!ok)
      throw ShapeError("concat: shape mismatch " + shape_str(first.shape()) + " vs " +
                       shape_str(p.shape()) + " along axis " + std::to_string(axis));
  }
  const bool rowwise = first.rank() == 1 || axis == 0;
  const std::size_t rows = first.rank() == 2 ? first.dim(0) : 1;
  Shape shape = first.shape();
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t e = p.rank() == 1 ? p.dim(0) : p.dim(axis);
    extents.push_back(e);
    total += e;
  }
  shape[first.rank() == 1 ? 0 : axis] = total;
  std::vector<double> y;
  y.reserve(shape_numel(shape));
  if (rowwise) {
    for (const auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
  } else {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto d = parts[k].data();
        y.insert(y.end(), d.begin() + i * extents[k], d.begin() + (i + 1) * extents[k]);
      }
  }
  return detail::make_result("concat", shape, std::move(y), parts,
                             [rowwise, rows, extents, total](detail::Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      double* g = detail::parent_grad(self, k);
      const std::size_t e = extents[k];
      if (g) {
        if (rowwise) {
          const std::size_t n = self.parents[k]->data.size();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
        } else {
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < e; ++j) g[i * e + j] += self.grad[i * total + offset + j];
        }
      }
      offset += rowwise ? self.parents[k]->data.size() : e;
    }
  });
}

/// Half-open range [start, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t end) {
  detail::require_defined(x, "slice");
  detail::require_axis(x, axis, "slice");
  if (x.rank() == 0) throw ShapeError("slice: scalar input");
  const std::size_t extent = x.dim(axis);
  if (start >= end || end > extent)
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) +
                     ") invalid for extent " + std::to_string(extent) + " of shape " +
                     shape_str(x.shape()));
  const std::size_t rows = x.rows(), cols = x.cols();
  const bool rowwise = x.rank() == 2 && axis == 0;
  Shape shape = x.shape();
  shape[axis] = end - start;
  std::vector<double> y;
  y.reserve(shape_numel(shape));
  const auto X = x.data();
  if (rowwise) {
    y.assign(X.begin() + start * cols, X.begin() + end * cols);
  } else {
    for (std::size_t i = 0; i < rows; ++i)
      y.insert(y.end(), X.begin() + i * cols + start, X.begin() + i * cols + end);
  }
  return detail::make_result("slice", shape, std::move(y), {x},
                             [rowwise, rows, cols, start, end](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const std::size_t w = end - start;
    if (rowwise) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[start * cols + i] += self.grad[i];
    } else {
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < w; ++j) gx[i * cols + start + j] += self.grad[i * w + j];
    }
  });
}

/// Sum of all entries, as a scalar.
inline Tensor sum(const Tensor& x) {
  detail::require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result("sum", {}, {s}, {x}, [](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const double g = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) gx[i] += g;
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

namespace detail {

inline Tensor reduce_axis(const char* op, const Tensor& x, std::size_t axis, double factor) {
  require_defined(x, op);
  require_axis(x, axis, op);
  if (x.rank() < 2) {
    Tensor s = sum(x);
    return factor == 1.0 ? s : scale(s, factor);
  }
  const Lines ln = lines_along(x, axis);
  Shape shape = x.shape();
  shape[axis] = 1;
  std::vector<double> y(ln.count, 0.0);
  const auto X = x.data();
  for (std::size_t k = 0; k < ln.count; ++k) {
    double s = 0.0;
    for (std::size_t t = 0; t < ln.length; ++t) s += X[k * ln.step + t * ln.stride];
    y[k] = factor * s;
  }
  return make_result(op, shape, std::move(y), {x}, [ln, factor](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t k = 0; k < ln.count; ++k)
      for (std::size_t t = 0; t < ln.length; ++t)
        gx[k * ln.step + t * ln.stride] += factor * self.grad[k];
  });
}

}  // namespace detail

/// Sum along `axis`, keeping it with extent 1.
inline Tensor sum(const Tensor& x, std::size_t axis) {
  return detail::reduce_axis("sum_axis", x, axis, 1.0);
}

/// Mean along `axis`, keeping it with extent 1.
inline Tensor mean(const Tensor& x, std::size_t axis) {
  detail::require_defined(x, "mean");
  detail::require_axis(x, axis, "mean");
  const std::size_t n = x.rank() < 2 ? x.numel() : x.dim(axis);
  if (x.rank() < 2) return scale(sum(x), 1.0 / static_cast<double>(n));
  return detail::reduce_axis("mean_axis", x, axis, 1.0 / static_cast<double>(n));
}

/// Max-shifted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  detail::require_defined(x, "softmax");
  detail::require_axis(x, axis, "softmax");
  const detail::Lines ln = detail::lines_along(x, axis);
  std::vector<double> y(x.numel());
  const auto X = x.data();
  for (std::size_t k = 0; k < ln.count; ++k) {
    double mx = -INFINITY;
    for (std::size_t t = 0; t < ln.length; ++t) mx = std::max(mx, X[k * ln.step + t * ln.stride]);
    double z = 0.0;
    for (std::size_t t = 0; t < ln.length; ++t) {
      const std::size_t i = k * ln.step + t * ln.stride;
      y[i] = std::exp(X[i] - mx);
      z += y[i];
    }
    for (std::size_t t = 0; t < ln.length; ++t) y[k * ln.step + t * ln.stride] /= z;
  }
  return detail::make_result("softmax", x.shape(), std::move(y), {x}, [ln](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t k = 0; k < ln.count; ++k) {
      double dot = 0.0;
      for (std::size_t t = 0; t < ln.length; ++t) {
        const std::size_t i = k * ln.step + t * ln.stride;
        dot += self.grad[i] * self.data[i];
      }
      for (std::size_t t = 0; t < ln.length; ++t) {
        const std::size_t i = k * ln.step + t * ln.stride;
        gx[i] += self.data[i] * (self.grad[i] - dot);
      }
    }
  });
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
  detail::require_defined(x, "log_softmax");
  detail::require_axis(x, axis, "log_softmax");
  const detail::Lines ln = detail::lines_along(x, axis);
  std::vector<double> y(x.numel());
  const auto X = x.data();
  for (std::size_t k = 0; k < ln.count; ++k) {
    double mx = -INFINITY;
    for (std::size_t t = 0; t < ln.length; ++t) mx = std::max(mx, X[k * ln.step + t * ln.stride]);
    double z = 0.0;
    for (std::size_t t = 0; t < ln.length; ++t) z += std::exp(X[k * ln.step + t * ln.stride] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t t = 0; t < ln.length; ++t) {
      const std::size_t i = k * ln.step + t * ln.stride;
      y[i] = X[i] - lz;
    }
  }
  return detail::make_result("log_softmax", x.shape(), std::move(y), {x}, [ln](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t k = 0; k < ln.count; ++k) {
      double gsum = 0.0;
      for (std::size_t t = 0; t < ln.length; ++t) gsum += self.grad[k * ln.step + t * ln.stride];
      for (std::size_t t = 0; t < ln.length; ++t) {
        const std::size_t i = k * ln.step + t * ln.stride;
        gx[i] += self.grad[i] - std::exp(self.data[i]) * gsum;
      }
    }
  });
}

/// Normalizes each row over the last axis, then applies gain and bias
/// (both of extent cols()).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_defined(x, "layer_norm");
  detail::require_defined(gain, "layer_norm");
  detail::require_defined(bias, "layer_norm");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.numel() != cols || bias.numel() != cols)
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match input " + shape_str(x.shape()));
  std::vector<double> y(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto X = x.data();
  const auto G = gain.data();
  const auto B = bias.data();
  for (std::size_t i = 0; i < rows; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += X[i * cols + j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double dlt = X[i * cols + j] - mu;
      var += dlt * dlt;
    }
    var /= static_cast<double>(cols);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t k = i * cols + j;
      xhat[k] = (X[k] - mu) * inv_std[i];
      y[k] = xhat[k] * G[j] + B[j];
    }
  }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(y), {x, gain, bias},
      [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& G = self.parents[1]->data;
        double* gx = detail::parent_grad(self, 0);
        double* gg = detail::parent_grad(self, 1);
        double* gb = detail::parent_grad(self, 2);
        const double n = static_cast<double>(cols);
        for (std::size_t i = 0; i < rows; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t k = i * cols + j;
            const double g = self.grad[k];
            if (gg) gg[j] += g * xhat[k];
            if (gb) gb[j] += g;
            const double d = g * G[j];
            mean_d += d;
            mean_dx += d * xhat[k];
          }
          if (!gx) continue;
          mean_d /= n;
          mean_dx /= n;
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t k = i * cols + j;
            gx[k] += inv_std[i] * (self.grad[k] * G[j] - mean_d - xhat[k] * mean_dx);
          }
        }
      });
}

/// Scales every row (last axis) to unit Euclidean norm. Norms below 1e-12
/// are clamped to 1e-12.
inline Tensor l2_normalize(const Tensor& x) {
  detail::require_defined(x, "l2_normalize");
  constexpr double kFloor = 1e-12;
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> y(x.numel());
  std::vector<double> norms(rows);
  const auto X = x.data();
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += X[i * cols + j] * X[i * cols + j];
    norms[i] = std::max(std::sqrt(s), kFloor);
    for (std::size_t j = 0; j < cols; ++j) y[i * cols + j] = X[i * cols + j] / norms[i];
  }
  return detail::make_result("l2_normalize", x.shape(), std::move(y), {x},
                             [rows, cols, norms = std::move(norms)](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < rows; ++i) {
      const bool clamped = norms[i] <= kFloor;
      double dot = 0.0;
      if (!clamped)
        for (std::size_t j = 0; j < cols; ++j) dot += self.data[i * cols + j] * self.grad[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t k = i * cols + j;
        gx[k] += (self.grad[k] - self.data[k] * dot) / norms[i];
      }
    }
  });
}

/// Inverted dropout: at train time kept entries are divided by 1 - p. With
/// p == 0 or outside training the input is returned unchanged.
inline Tensor dropout(const Tensor& x, double p, bool training, Rng* rng) {
  detail::require_defined(x, "dropout");
  if (!(p >= 0.0 && p < 1.0)) throw ShapeError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  if (!rng) throw ShapeError("dropout: training mode needs an rng");
  std::vector<double> mask(x.numel());
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : mask) m = rng->uniform() < p ? 0.0 : keep;
  std::vector<double> y(x.numel());
  const auto X = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = X[i] * mask[i];
  return detail::make_result("dropout", x.shape(), std::move(y), {x},
                             [mask = std::move(mask)](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Uniform dispatch, used by the gradient sweep and the CLI.

enum class Primitive {
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kConcat,
  kSlice,
  kSum,
  kMean,
  kSoftmax,
  kLogSoftmax,
  kSigmoid,
  kTanh,
  kRelu,
  kLeakyRelu,
  kExp,
  kLog,
  kLayerNorm,
  kL2Normalize,
  kDropout,
  kTranspose,
  kScale,
};

inline const char* primitive_name(Primitive p) {
  switch (p) {
    case Primitive::kMatmul: return "matmul";
    case Primitive::kAdd: return "add";
    case Primitive::kSub: return "sub";
    case Primitive::kMul: return "mul";
    case Primitive::kConcat: return "concat";
    case Primitive::kSlice: return "slice";
    case Primitive::kSum: return "sum";
    case Primitive::kMean: return "mean";
    case Primitive::kSoftmax: return "softmax";
    case Primitive::kLogSoftmax: return "log_softmax";
    case Primitive::kSigmoid: return "sigmoid";
    case Primitive::kTanh: return "tanh";
    case Primitive::kRelu: return "relu";
    case Primitive::kLeakyRelu: return "leaky_relu";
    case Primitive::kExp: return "exp";
    case Primitive::kLog: return "log";
    case Primitive::kLayerNorm: return "layer_norm";
    case Primitive::kL2Normalize: return "l2_normalize";
    case Primitive::kDropout: return "dropout";
    case Primitive::kTranspose: return "transpose";
    case Primitive::kScale: return "scale";
  }
  return "?";
}

struct PrimitiveAttrs {
  std::optional<std::size_t> axis;  // reductions over everything when empty
  double slope = 0.01;
  double factor = 1.0;
  double p = 0.0;
  bool training = false;
  Rng* rng = nullptr;
  std::size_t start = 0;
  std::size_t end = 0;
  double eps = 1e-5;
};

inline Tensor apply_primitive(Primitive kind, const std::vector<Tensor>& in, const PrimitiveAttrs& attrs = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n)
      throw ShapeError(std::string(primitive_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(in.size()));
  };
  auto axis = [&]() {
    if (!attrs.axis) throw ShapeError(std::string(primitive_name(kind)) + ": axis required");
    return *attrs.axis;
  };
  switch (kind) {
    case Primitive::kMatmul: arity(2); return matmul(in[0], in[1]);
    case Primitive::kAdd: arity(2); return add(in[0], in[1]);
    case Primitive::kSub: arity(2); return sub(in[0], in[1]);
    case Primitive::kMul: arity(2); return mul(in[0], in[1]);
    case Primitive::kConcat: return concat(in, axis());
    case Primitive::kSlice: arity(1); return slice(in[0], axis(), attrs.start, attrs.end);
    case Primitive::kSum: arity(1); return attrs.axis ? sum(in[0], *attrs.axis) : sum(in[0]);
    case Primitive::kMean: arity(1); return attrs.axis ? mean(in[0], *attrs.axis) : mean(in[0]);
    case Primitive::kSoftmax: arity(1); return softmax(in[0], axis());
    case Primitive::kLogSoftmax: arity(1); return log_softmax(in[0], axis());
    case Primitive::kSigmoid: arity(1); return sigmoid(in[0]);
    case Primitive::kTanh: arity(1); return tanh(in[0]);
    case Primitive::kRelu: arity(1); return relu(in[0]);
    case Primitive::kLeakyRelu: arity(1); return leaky_relu(in[0], attrs.slope);
    case Primitive::kExp: arity(1); return exp(in[0]);
    case Primitive::kLog: arity(1); return log(in[0]);
    case Primitive::kLayerNorm: arity(3); return layer_norm(in[0], in[1], in[2], attrs.eps);
    case Primitive::kL2Normalize: arity(1); return l2_normalize(in[0]);
    case Primitive::kDropout: arity(1); return dropout(in[0], attrs.p, attrs.training, attrs.rng);
    case Primitive::kTranspose: arity(1); return transpose(in[0]);
    case Primitive::kScale: arity(1); return scale(in[0], attrs.factor);
  }
  throw ShapeError("unknown primitive");
}

// ---------------------------------------------------------------------------
// Convenience

/// Entries drawn from N(0, stddev^2).
inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// One row per index, columns set to 1 at the given class.
inline Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  auto t = Tensor::zeros({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw ShapeError("one_hot: label " + std::to_string(labels[i]) + " outside [0," +
                       std::to_string(classes) + ")");
    t.mutable_data()[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

}  // namespace mpthcl

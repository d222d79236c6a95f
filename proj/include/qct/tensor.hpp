#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double arrays. A Tensor is a cheap handle to a graph Node; operations
// record their inputs and a backward rule when any input requires a
// gradient, and backward() replays the recorded graph in reverse
// topological order.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "qct/error.hpp"

namespace qct {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

namespace detail {
inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}
}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                           std::to_string(values.size()) + " values");
    }
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.front(); }
  std::size_t cols() const { return node_->shape.size() > 1 ? node_->shape.back() : 1; }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }

  /// Empty span when no gradient has been accumulated yet.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

  /// Deep copy of the values into a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node_->value, requires_grad);
  }

 private:
  std::shared_ptr<Node> node_;
};

/// A named trainable leaf.
struct Parameter {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline Tensor make_result(Shape shape, std::initializer_list<const Tensor*> inputs) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value.assign(shape_numel(node->shape), 0.0);
  bool track = false;
  if (!grad_disabled()) {
    for (const Tensor* t : inputs) track = track || t->requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const Tensor* t : inputs) node->inputs.push_back(t->ptr());
  }
  return Tensor(std::move(node));
}

inline bool wants_grad(const Node& n, std::size_t i) { return n.inputs[i]->requires_grad; }

inline std::vector<double>& input_grad(Node& n, std::size_t i) {
  n.inputs[i]->ensure_grad();
  return n.inputs[i]->grad;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.dim() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

}  // namespace detail

/// Reverse topological order of every gradient-carrying node reachable
/// from a root: each node's inputs precede it.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    if (!root.defined() || !root.requires_grad()) return tape;
    std::unordered_set<const Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  const std::vector<Node*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node*> order_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf's grad.
/// Interior gradients are reset on each call; leaf gradients add up
/// until zero_grad().
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;
  Tape tape = Tape::record(loss);
  for (Node* n : tape.order()) {
    if (!n->is_leaf) n->grad.assign(n->value.size(), 0.0);
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  const auto& order = tape.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

/// Forward identity; contributes nothing to the gradients of x's ancestors.
inline Tensor stop_gradient(const Tensor& x) { return x.clone(false); }

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = detail::make_result(a.shape(), {&a, &b});
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!detail::wants_grad(self, k)) continue;
        auto& g = detail::input_grad(self, k);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = detail::make_result(a.shape(), {&a, &b});
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      if (detail::wants_grad(self, 0)) {
        auto& g = detail::input_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (detail::wants_grad(self, 1)) {
        auto& g = detail::input_grad(self, 1);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    };
  }
  return out;
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = detail::make_result(a.shape(), {&a, &b});
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      if (detail::wants_grad(self, 0)) {
        auto& g = detail::input_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
      }
      if (detail::wants_grad(self, 1)) {
        auto& g = detail::input_grad(self, 1);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
      }
    };
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::make_result(a.shape(), {&a});
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = c * a[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [c](Node& self) {
      auto& g = detail::input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    };
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  Tensor out = detail::make_result(Shape{1}, {&a});
  double s = 0.0;
  for (double v : a.values()) s += v;
  out.mutable_values()[0] = s;
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      auto& g = detail::input_grad(self, 0);
      for (double& v : g) v += self.grad[0];
    };
  }
  return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Same values under a new shape with the same element count.
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out = detail::make_result(std::move(shape), {&a});
  std::copy(a.values().begin(), a.values().end(), out.mutable_values().begin());
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      auto& g = detail::input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor out = detail::make_result(a.shape(), {&a});
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 1.0 / (1.0 + std::exp(-a[i]));
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      auto& g = detail::input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double s = self.value[i];
        g[i] += self.grad[i] * s * (1.0 - s);
      }
    };
  }
  return out;
}

/// x * sigmoid(x).
inline Tensor swish(const Tensor& a) {
  Tensor out = detail::make_result(a.shape(), {&a});
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] / (1.0 + std::exp(-a[i]));
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      const auto& x = self.inputs[0]->value;
      auto& g = detail::input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x[i]));
        g[i] += self.grad[i] * (s + x[i] * s * (1.0 - s));
      }
    };
  }
  return out;
}

/// Gated linear unit over the last axis: [a | b] -> a * sigmoid(b).
inline Tensor glu(const Tensor& x) {
  detail::require_matrix(x, "glu");
  const std::size_t n = x.rows(), c2 = x.cols();
  if (c2 % 2 != 0) throw DimensionError("glu: odd channel count");
  const std::size_t c = c2 / 2;
  Tensor out = detail::make_result(Shape{n, c}, {&x});
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) {
      double a = xv[r * c2 + j], b = xv[r * c2 + c + j];
      o[r * c + j] = a / (1.0 + std::exp(-b));
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [n, c, c2](Node& self) {
      const auto& xv = self.inputs[0]->value;
      auto& g = detail::input_grad(self, 0);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
          double a = xv[r * c2 + j], b = xv[r * c2 + c + j];
          double s = 1.0 / (1.0 + std::exp(-b));
          double up = self.grad[r * c + j];
          g[r * c2 + j] += up * s;
          g[r * c2 + c + j] += up * a * s * (1.0 - s);
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

/// C = A * B for A[m x k], B[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out = detail::make_result(Shape{m, n}, {&a, &b});
  using detail::ConstMap;
  using detail::MutMap;
  MutMap(out.mutable_values().data(), m, n).noalias() =
      ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  if (out.requires_grad()) {
    out.node()->backward_fn = [m, k, n](Node& self) {
      ConstMap dc(self.grad.data(), m, n);
      if (detail::wants_grad(self, 0)) {
        auto& g = detail::input_grad(self, 0);
        MutMap(g.data(), m, k).noalias() += dc * ConstMap(self.inputs[1]->value.data(), k, n).transpose();
      }
      if (detail::wants_grad(self, 1)) {
        auto& g = detail::input_grad(self, 1);
        MutMap(g.data(), k, n).noalias() += ConstMap(self.inputs[0]->value.data(), m, k).transpose() * dc;
      }
    };
  }
  return out;
}

/// x[n x c] + bias[c] broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  detail::require_matrix(x, "add_row_bias");
  const std::size_t n = x.rows(), c = x.cols();
  if (bias.numel() != c) throw DimensionError("add_row_bias: bias length differs from column count");
  Tensor out = detail::make_result(x.shape(), {&x, &bias});
  auto o = out.mutable_values();
  auto xv = x.values();
  auto bv = bias.values();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) o[r * c + j] = xv[r * c + j] + bv[j];
  if (out.requires_grad()) {
    out.node()->backward_fn = [n, c](Node& self) {
      if (detail::wants_grad(self, 0)) {
        auto& g = detail::input_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (detail::wants_grad(self, 1)) {
        auto& g = detail::input_grad(self, 1);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[r * c + j];
      }
    };
  }
  return out;
}

/// x * W + b.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_row_bias(matmul(x, weight), bias);
}

// Arithmetic sugar so loss formulas can be written once for double and Tensor.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

}  // namespace qct

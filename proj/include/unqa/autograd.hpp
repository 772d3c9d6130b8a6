#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Graphs are built eagerly by the op functions below and
// released when the last Var referencing them goes away. Nodes that do not
// depend on any grad-requiring leaf record neither inputs nor a backward
// closure, so inference carries no tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "unqa/core.hpp"

namespace unqa {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
  Node* in(std::size_t i) const { return inputs[i].get(); }
};

}  // namespace detail

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> value() const { return node_->value; }
  double item() const { return node_->value.at(0); }
  double operator[](std::size_t i) const { return node_->value[i]; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient accumulated by backward(); empty when none reached this node.
  std::span<const double> grad() const { return node_->grad; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

inline Var constant(Shape shape, std::vector<double> value) {
  require(numel(shape) == value.size(), ErrorCode::shape_mismatch,
          "constant: value size does not match shape " + shape_string(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return Var(std::move(node));
}

inline Var variable(Shape shape, std::vector<double> value) {
  Var v = constant(std::move(shape), std::move(value));
  v.node()->requires_grad = true;
  return v;
}

inline Var zeros(Shape shape) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

inline Var scalar(double value) { return constant({1}, {value}); }

namespace detail {

template <class Backward>
Var make_op(Shape shape, std::vector<double> value, std::vector<Var> inputs,
            Backward&& backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Var& v) { return v.requires_grad(); });
  if (tracked) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& v : inputs) node->inputs.push_back(v.shared());
    node->backward = std::forward<Backward>(backward);
  }
  return Var(std::move(node));
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
          std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
              shape_string(b.shape()) + " differ");
}

}  // namespace detail

/// Runs reverse accumulation from `root`, seeding its gradient with `seed`
/// (broadcast to every element). Gradients accumulate into leaf nodes.
inline void backward(const Var& root, double seed = 1.0) {
  if (!root.requires_grad()) return;
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad();
  for (double& g : root.node()->grad) g += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto* in = self.in(k);
      if (!in->requires_grad) continue;
      in->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto* in = self.in(k);
      if (!in->requires_grad) continue;
      in->ensure_grad();
      const double sign = k == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += sign * self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto* x = self.in(0);
    auto* y = self.in(1);
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += self.grad[i] * y->value[i];
    }
    if (y->requires_grad) {
      y->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) y->grad[i] += self.grad[i] * x->value[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto* x = self.in(0);
    auto* y = self.in(1);
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += self.grad[i] / y->value[i];
    }
    if (y->requires_grad) {
      y->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        y->grad[i] -= self.grad[i] * self.value[i] / y->value[i];
      }
    }
  });
}

inline Var scale(const Var& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return detail::make_op(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += factor * self.grad[i];
  });
}

inline Var add_scalar(const Var& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c;
  return detail::make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += self.grad[i];
  });
}

namespace detail {

template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
  return make_op(a.shape(), std::move(out), {a}, [df](Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      x->grad[i] += self.grad[i] * df(x->value[i], self.value[i]);
    }
  });
}

}  // namespace detail

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var gelu(const Var& a) {
  return detail::unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var abs(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var square(const Var& a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var sqrt(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasting

inline Var sum(const Var& a) {
  const double total = std::accumulate(a.value().begin(), a.value().end(), 0.0);
  return detail::make_op({1}, {total}, {a}, [](detail::Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    for (double& g : x->grad) g += self.grad[0];
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Replicates a one-element Var to `shape`.
inline Var expand_scalar(const Var& s, Shape shape) {
  require(s.size() == 1, ErrorCode::shape_mismatch, "expand_scalar: input is not a scalar");
  std::vector<double> out(numel(shape), s[0]);
  return detail::make_op(std::move(shape), std::move(out), {s}, [](detail::Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    x->grad[0] += std::accumulate(self.grad.begin(), self.grad.end(), 0.0);
  });
}

/// Mean over the last axis: [..., L] -> [...].
inline Var mean_last(const Var& a) {
  const std::size_t inner = a.shape().back();
  const std::size_t outer = a.size() / inner;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  std::vector<double> out(outer);
  for (std::size_t r = 0; r < outer; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < inner; ++c) acc += a[r * inner + c];
    out[r] = acc / static_cast<double>(inner);
  }
  return detail::make_op(std::move(shape), std::move(out), {a}, [inner, outer](detail::Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    const double w = 1.0 / static_cast<double>(inner);
    for (std::size_t r = 0; r < outer; ++r) {
      const double g = self.grad[r] * w;
      for (std::size_t c = 0; c < inner; ++c) x->grad[r * inner + c] += g;
    }
  });
}

/// Sum over the last axis of a matrix: [R, C] -> [R].
inline Var sum_rows(const Var& a) {
  require(a.rank() == 2, ErrorCode::shape_mismatch, "sum_rows: expected a matrix");
  return scale(mean_last(a), static_cast<double>(a.dim(1)));
}

/// Mean over the first axis: [T, ...] -> [...].
inline Var mean_axis0(const Var& a) {
  const std::size_t outer = a.shape().front();
  const std::size_t inner = a.size() / outer;
  Shape shape(a.shape().begin() + 1, a.shape().end());
  if (shape.empty()) shape = {1};
  std::vector<double> out(inner, 0.0);
  for (std::size_t t = 0; t < outer; ++t) {
    for (std::size_t i = 0; i < inner; ++i) out[i] += a[t * inner + i];
  }
  for (double& v : out) v /= static_cast<double>(outer);
  return detail::make_op(std::move(shape), std::move(out), {a}, [inner, outer](detail::Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    const double w = 1.0 / static_cast<double>(outer);
    for (std::size_t t = 0; t < outer; ++t) {
      for (std::size_t i = 0; i < inner; ++i) x->grad[t * inner + i] += self.grad[i] * w;
    }
  });
}

/// x[..., L] - m[...] broadcast over the last axis.
inline Var sub_last(const Var& x, const Var& m) {
  const std::size_t inner = x.shape().back();
  const std::size_t outer = x.size() / inner;
  require(m.size() == outer, ErrorCode::shape_mismatch, "sub_last: broadcast size mismatch");
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < outer; ++r) {
    for (std::size_t c = 0; c < inner; ++c) out[r * inner + c] = x[r * inner + c] - m[r];
  }
  return detail::make_op(x.shape(), std::move(out), {x, m}, [inner, outer](detail::Node& self) {
    auto* a = self.in(0);
    auto* b = self.in(1);
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t r = 0; r < outer; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < inner; ++c) acc += self.grad[r * inner + c];
        b->grad[r] -= acc;
      }
    }
  });
}

/// x[R, C] + v[C] broadcast over rows.
inline Var add_row(const Var& x, const Var& v) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  require(v.size() == cols, ErrorCode::shape_mismatch, "add_row: broadcast size mismatch");
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + v[c];
  }
  return detail::make_op(x.shape(), std::move(out), {x, v}, [rows, cols](detail::Node& self) {
    auto* a = self.in(0);
    auto* b = self.in(1);
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) b->grad[c] += self.grad[r * cols + c];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& a, Shape shape) {
  require(numel(shape) == a.size(), ErrorCode::shape_mismatch,
          "reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  std::vector<double> out(a.value().begin(), a.value().end());
  return detail::make_op(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += self.grad[i];
  });
}

inline Var transpose(const Var& a) {
  require(a.rank() == 2, ErrorCode::shape_mismatch, "transpose: expected a matrix");
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  }
  return detail::make_op({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) x->grad[i * n + j] += self.grad[j * m + i];
    }
  });
}

namespace detail {

inline std::pair<std::size_t, std::size_t> outer_inner(const Shape& shape, std::size_t axis) {
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, inner};
}

}  // namespace detail

/// Concatenates along `axis`; all other extents must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  require(!parts.empty(), ErrorCode::invalid_argument, "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), ErrorCode::shape_mismatch, "concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), ErrorCode::shape_mismatch, "concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      require(d == axis || p.dim(d) == first[d], ErrorCode::shape_mismatch,
              "concat: extent mismatch " + shape_string(p.shape()) + " vs " + shape_string(first));
    }
    shape[axis] += p.dim(axis);
  }
  const auto [outer, inner] = detail::outer_inner(shape, axis);
  const std::size_t total = shape[axis];
  std::vector<double> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t extent = p.dim(axis);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.value().begin() + static_cast<std::ptrdiff_t>(o * extent * inner), extent * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    }
    offset += extent;
  }
  return detail::make_op(shape, std::move(out), parts,
                         [outer, inner, total, offsets, axis](detail::Node& self) {
                           for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                             auto* x = self.in(k);
                             if (!x->requires_grad) continue;
                             x->ensure_grad();
                             const std::size_t extent = x->shape[axis];
                             for (std::size_t o = 0; o < outer; ++o) {
                               const double* src = self.grad.data() + (o * total + offsets[k]) * inner;
                               double* dst = x->grad.data() + o * extent * inner;
                               for (std::size_t i = 0; i < extent * inner; ++i) dst[i] += src[i];
                             }
                           }
                         });
}

/// Takes indices [begin, end) along `axis`.
inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require(axis < a.rank() && begin < end && end <= a.dim(axis), ErrorCode::shape_mismatch,
          "slice: range out of bounds");
  Shape shape = a.shape();
  const std::size_t total = shape[axis];
  shape[axis] = end - begin;
  const auto [outer, inner] = detail::outer_inner(shape, axis);
  const std::size_t extent = end - begin;
  std::vector<double> out(numel(shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.value().begin() + static_cast<std::ptrdiff_t>((o * total + begin) * inner),
                extent * inner, out.begin() + static_cast<std::ptrdiff_t>(o * extent * inner));
  }
  return detail::make_op(std::move(shape), std::move(out), {a},
                         [outer, inner, total, begin, extent](detail::Node& self) {
                           auto* x = self.in(0);
                           x->ensure_grad();
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* src = self.grad.data() + o * extent * inner;
                             double* dst = x->grad.data() + (o * total + begin) * inner;
                             for (std::size_t i = 0; i < extent * inner; ++i) dst[i] += src[i];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(const Var& a, const Var& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ErrorCode::shape_mismatch,
          "matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  return detail::make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto* x = self.in(0);
    auto* y = self.in(1);
    if (x->requires_grad) {
      x->ensure_grad();
      detail::gemm_nt(self.grad.data(), y->value.data(), x->grad.data(), m, n, k);
    }
    if (y->requires_grad) {
      y->ensure_grad();
      detail::gemm_tn(x->value.data(), self.grad.data(), y->grad.data(), m, k, n);
    }
  });
}

/// Affine map over rows: x[m,in] W[out,in]^T + b[out]. `b` may be undefined.
inline Var linear(const Var& x, const Var& w, const Var& b) {
  require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1), ErrorCode::shape_mismatch,
          "linear: input " + shape_string(x.shape()) + " weight " + shape_string(w.shape()));
  const std::size_t m = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  std::vector<double> out(m * out_dim, 0.0);
  if (b.defined()) {
    require(b.size() == out_dim, ErrorCode::shape_mismatch, "linear: bias size mismatch");
    for (std::size_t i = 0; i < m; ++i) std::copy(b.value().begin(), b.value().end(), out.begin() + static_cast<std::ptrdiff_t>(i * out_dim));
  }
  detail::gemm_nt(x.value().data(), w.value().data(), out.data(), m, in, out_dim);
  std::vector<Var> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::make_op({m, out_dim}, std::move(out), std::move(inputs),
                         [m, in, out_dim](detail::Node& self) {
                           auto* xi = self.in(0);
                           auto* wi = self.in(1);
                           if (xi->requires_grad) {
                             xi->ensure_grad();
                             detail::gemm_nn(self.grad.data(), wi->value.data(), xi->grad.data(), m, out_dim, in);
                           }
                           if (wi->requires_grad) {
                             wi->ensure_grad();
                             detail::gemm_tn(self.grad.data(), xi->value.data(), wi->grad.data(), m, out_dim, in);
                           }
                           if (self.inputs.size() > 2 && self.in(2)->requires_grad) {
                             auto* bi = self.in(2);
                             bi->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t o = 0; o < out_dim; ++o) bi->grad[o] += self.grad[i * out_dim + o];
                             }
                           }
                         });
}

/// Row-wise softmax over the last axis.
inline Var softmax_rows(const Var& a) {
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = a.value().data() + r * cols;
    double* dst = out.data() + r * cols;
    const double peak = *std::max_element(src, src + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (dst[c] = std::exp(src[c] - peak));
    for (std::size_t c = 0; c < cols; ++c) dst[c] /= total;
  }
  return detail::make_op(a.shape(), std::move(out), {a}, [rows, cols](detail::Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * g[c];
      for (std::size_t c = 0; c < cols; ++c) x->grad[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

/// D[i,j] = o[i] - o[j] for a vector o of length B.
inline Var pairwise_diff(const Var& o) {
  const std::size_t n = o.size();
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = o[i] - o[j];
  }
  return detail::make_op({n, n}, std::move(out), {o}, [n](detail::Node& self) {
    auto* x = self.in(0);
    x->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        x->grad[i] += g;
        x->grad[j] -= g;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling over [N, C, H, W]

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {

struct ConvDims {
  std::size_t n, cin, h, w, cout, kh, kw, oh, ow, stride, pad;
};

inline void im2col(const double* x, const ConvDims& d, double* col) {
  const std::size_t plane = d.oh * d.ow;
  for (std::size_t c = 0; c < d.cin; ++c) {
    for (std::size_t ky = 0; ky < d.kh; ++ky) {
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        double* row = col + ((c * d.kh + ky) * d.kw + kx) * plane;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.pad);
          double* dst = row + oy * d.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) {
            std::fill_n(dst, d.ow, 0.0);
            continue;
          }
          const double* src = x + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

inline void col2im(const double* col, const ConvDims& d, double* x) {
  const std::size_t plane = d.oh * d.ow;
  for (std::size_t c = 0; c < d.cin; ++c) {
    for (std::size_t ky = 0; ky < d.kh; ++ky) {
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        const double* row = col + ((c * d.kh + ky) * d.kw + kx) * plane;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - static_cast<std::ptrdiff_t>(d.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          double* dst = x + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          const double* src = row + oy * d.ow;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - static_cast<std::ptrdiff_t>(d.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x[N,Cin,H,W] * w[Cout,Cin,kh,kw] + b[Cout]; `b` may be undefined.
inline Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dGeometry geo) {
  require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(1), ErrorCode::shape_mismatch,
          "conv2d: input " + shape_string(x.shape()) + " weight " + shape_string(w.shape()));
  require(geo.stride >= 1, ErrorCode::invalid_argument, "conv2d: stride must be positive");
  detail::ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0,
                     geo.stride, geo.padding};
  require(d.h + 2 * d.pad >= d.kh && d.w + 2 * d.pad >= d.kw, ErrorCode::shape_mismatch,
          "conv2d: input " + shape_string(x.shape()) + " smaller than kernel");
  d.oh = (d.h + 2 * d.pad - d.kh) / d.stride + 1;
  d.ow = (d.w + 2 * d.pad - d.kw) / d.stride + 1;
  const std::size_t plane = d.oh * d.ow;
  const std::size_t kdim = d.cin * d.kh * d.kw;
  std::vector<double> out(d.n * d.cout * plane, 0.0);
  std::vector<double> col(kdim * plane);
  for (std::size_t s = 0; s < d.n; ++s) {
    detail::im2col(x.value().data() + s * d.cin * d.h * d.w, d, col.data());
    double* dst = out.data() + s * d.cout * plane;
    if (b.defined()) {
      for (std::size_t co = 0; co < d.cout; ++co) std::fill_n(dst + co * plane, plane, b[co]);
    }
    detail::gemm_nn(w.value().data(), col.data(), dst, d.cout, kdim, plane);
  }
  std::vector<Var> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::make_op({d.n, d.cout, d.oh, d.ow}, std::move(out), std::move(inputs),
                         [d, plane, kdim](detail::Node& self) {
                           auto* xi = self.in(0);
                           auto* wi = self.in(1);
                           detail::Node* bi = self.inputs.size() > 2 ? self.in(2) : nullptr;
                           if (xi->requires_grad) xi->ensure_grad();
                           if (wi->requires_grad) wi->ensure_grad();
                           if (bi && bi->requires_grad) bi->ensure_grad();
                           std::vector<double> col(kdim * plane);
                           std::vector<double> dcol;
                           for (std::size_t s = 0; s < d.n; ++s) {
                             const double* g = self.grad.data() + s * d.cout * plane;
                             if (bi && bi->requires_grad) {
                               for (std::size_t co = 0; co < d.cout; ++co) {
                                 double acc = 0.0;
                                 for (std::size_t p = 0; p < plane; ++p) acc += g[co * plane + p];
                                 bi->grad[co] += acc;
                               }
                             }
                             if (wi->requires_grad) {
                               detail::im2col(xi->value.data() + s * d.cin * d.h * d.w, d, col.data());
                               detail::gemm_nt(g, col.data(), wi->grad.data(), d.cout, plane, kdim);
                             }
                             if (xi->requires_grad) {
                               dcol.assign(kdim * plane, 0.0);
                               detail::gemm_tn(wi->value.data(), g, dcol.data(), d.cout, kdim, plane);
                               detail::col2im(dcol.data(), d, xi->grad.data() + s * d.cin * d.h * d.w);
                             }
                           }
                         });
}

namespace detail {

struct PoolWindow {
  std::size_t begin, end;
};

inline std::vector<PoolWindow> adaptive_windows(std::size_t in, std::size_t out) {
  std::vector<PoolWindow> windows(out);
  for (std::size_t i = 0; i < out; ++i) {
    windows[i].begin = (i * in) / out;
    windows[i].end = ((i + 1) * in + out - 1) / out;
  }
  return windows;
}

}  // namespace detail

/// Adaptive average pooling: each output cell averages its near-equal
/// partition cell of the input ([N,C,H,W] -> [N,C,oh,ow]).
inline Var adaptive_avg_pool2d(const Var& x, std::size_t oh, std::size_t ow) {
  require(x.rank() == 4, ErrorCode::shape_mismatch, "adaptive_avg_pool2d: expected [N,C,H,W]");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  require(oh >= 1 && ow >= 1 && oh <= h && ow <= w, ErrorCode::shape_mismatch,
          "adaptive_avg_pool2d: target " + std::to_string(oh) + "x" + std::to_string(ow) +
              " larger than input " + std::to_string(h) + "x" + std::to_string(w));
  const auto rows = detail::adaptive_windows(h, oh);
  const auto cols = detail::adaptive_windows(w, ow);
  std::vector<double> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.value().data() + p * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t y = rows[i].begin; y < rows[i].end; ++y) {
          for (std::size_t xx = cols[j].begin; xx < cols[j].end; ++xx) acc += src[y * w + xx];
        }
        const double count = static_cast<double>((rows[i].end - rows[i].begin) * (cols[j].end - cols[j].begin));
        out[(p * oh + i) * ow + j] = acc / count;
      }
    }
  }
  return detail::make_op({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                         [planes, h, w, oh, ow, rows, cols](detail::Node& self) {
                           auto* xi = self.in(0);
                           xi->ensure_grad();
                           for (std::size_t p = 0; p < planes; ++p) {
                             double* dst = xi->grad.data() + p * h * w;
                             for (std::size_t i = 0; i < oh; ++i) {
                               for (std::size_t j = 0; j < ow; ++j) {
                                 const double count = static_cast<double>((rows[i].end - rows[i].begin) * (cols[j].end - cols[j].begin));
                                 const double g = self.grad[(p * oh + i) * ow + j] / count;
                                 for (std::size_t y = rows[i].begin; y < rows[i].end; ++y) {
                                   for (std::size_t xx = cols[j].begin; xx < cols[j].end; ++xx) dst[y * w + xx] += g;
                                 }
                               }
                             }
                           }
                         });
}

/// Non-overlapping k×k average pooling with floor semantics.
inline Var avg_pool2d(const Var& x, std::size_t k) {
  require(x.rank() == 4 && x.dim(2) >= k && x.dim(3) >= k, ErrorCode::shape_mismatch,
          "avg_pool2d: input " + shape_string(x.shape()) + " smaller than window");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(planes * oh * ow, 0.0);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.value().data() + p * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) acc += src[(i * k + dy) * w + j * k + dx];
        }
        out[(p * oh + i) * ow + j] = acc * inv;
      }
    }
  }
  return detail::make_op({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                         [planes, h, w, oh, ow, k, inv](detail::Node& self) {
                           auto* xi = self.in(0);
                           xi->ensure_grad();
                           for (std::size_t p = 0; p < planes; ++p) {
                             double* dst = xi->grad.data() + p * h * w;
                             for (std::size_t i = 0; i < oh; ++i) {
                               for (std::size_t j = 0; j < ow; ++j) {
                                 const double g = self.grad[(p * oh + i) * ow + j] * inv;
                                 for (std::size_t dy = 0; dy < k; ++dy) {
                                   for (std::size_t dx = 0; dx < k; ++dx) dst[(i * k + dy) * w + j * k + dx] += g;
                                 }
                               }
                             }
                           }
                         });
}

}  // namespace unqa

#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Every model module in the library is written against
// this header so that analytic gradients can be checked against finite
// differences at toy scale.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

namespace epiptrack::ag {

using Shape = std::vector<std::size_t>;
using Index = std::vector<long>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording for the lifetime of the guard (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (ag::numel(shape) != values.size())
      throw ShapeError("constant: value count does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape) {
    auto count = ag::numel(shape);
    return constant(std::move(shape), std::vector<double>(count, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    auto count = ag::numel(shape);
    return constant(std::move(shape), std::vector<double>(count, v));
  }
  static Tensor scalar(double v) { return constant({1}, {v}); }
  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  std::vector<double> values() const { return node_->value; }
  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not a scalar " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  Tensor detach() const { return constant(shape(), node_->value); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::vector<Tensor> const& inputs,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_mode()) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& t : inputs) n->parents.push_back(t.shared());
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

// Parent grads are only materialized for parents that take part in the graph.
inline double* grad_of(const std::shared_ptr<Node>& p) {
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

}  // namespace detail

/// Runs reverse accumulation from a scalar root.
inline void backward(const Tensor& root) {
  if (root.numel() != 1) throw ShapeError("backward: root must be scalar");
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and broadcasting arithmetic. `b` broadcasts when its shape is a
// suffix of `a`'s shape (bias vectors, positional tables).

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!detail::is_suffix(a.shape(), b.shape()))
    throw ShapeError("add: " + shape_str(b.shape()) + " does not broadcast to " +
                     shape_str(a.shape()));
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t o = 0; o < n; o += m)
    for (std::size_t j = 0; j < m; ++j) out[o + j] += bd[j];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [n, m](Node& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    if (double* gb = detail::grad_of(self.parents[1]))
      for (std::size_t o = 0; o < n; o += m)
        for (std::size_t j = 0; j < m; ++j) gb[j] += self.grad[o + j];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!detail::is_suffix(a.shape(), b.shape()))
    throw ShapeError("sub: " + shape_str(b.shape()) + " does not broadcast to " +
                     shape_str(a.shape()));
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t o = 0; o < n; o += m)
    for (std::size_t j = 0; j < m; ++j) out[o + j] -= bd[j];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [n, m](Node& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    if (double* gb = detail::grad_of(self.parents[1]))
      for (std::size_t o = 0; o < n; o += m)
        for (std::size_t j = 0; j < m; ++j) gb[j] -= self.grad[o + j];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!detail::is_suffix(a.shape(), b.shape()))
    throw ShapeError("mul: " + shape_str(b.shape()) + " does not broadcast to " +
                     shape_str(a.shape()));
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t o = 0; o < n; o += m)
    for (std::size_t j = 0; j < m; ++j) out[o + j] = ad[o + j] * bd[j];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [n, m](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t o = 0; o < n; o += m)
        for (std::size_t j = 0; j < m; ++j) ga[o + j] += self.grad[o + j] * bv[j];
    if (double* gb = detail::grad_of(self.parents[1]))
      for (std::size_t o = 0; o < n; o += m)
        for (std::size_t j = 0; j < m; ++j) gb[j] += self.grad[o + j] * av[o + j];
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  return detail::make_result(a.shape(), std::move(out), {a}, [c](Node& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += c * self.grad[i];
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += c;
  return detail::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (av[i] > 0.0) ga[i] += self.grad[i];
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = std::exp(v);
  return detail::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * self.value[i];
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = std::log(v);
  return detail::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] / av[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({1}, {s}, {a}, [](Node& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) ga[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Sums over one axis, removing it from the shape.
inline Tensor sum_axis(const Tensor& a, std::size_t axis) {
  const auto& s = a.shape();
  if (axis >= s.size()) throw ShapeError("sum_axis: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(outer * inner, 0.0);
  const auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += ad[(o * len + k) * inner + i];
  return detail::make_result(std::move(out_shape), std::move(out), {a},
                             [outer, inner, len](Node& self) {
                               if (double* ga = detail::grad_of(self.parents[0]))
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t k = 0; k < len; ++k)
                                     for (std::size_t i = 0; i < inner; ++i)
                                       ga[(o * len + k) * inner + i] += self.grad[o * inner + i];
                             });
}

inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

// ---------------------------------------------------------------------------
// Row-wise (last-axis) normalizations

inline Tensor softmax_lastdim(const Tensor& a) {
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = ad.data() + r * d;
    double* y = out.data() + r * d;
    double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [rows, d](Node& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * d;
        const double* g = self.grad.data() + r * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += y[j] * g[j];
        for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += y[j] * (g[j] - dot);
      }
  });
}

inline Tensor log_softmax_lastdim(const Tensor& a) {
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = ad.data() + r * d;
    double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[j] - lse;
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [rows, d](Node& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * d;
        const double* g = self.grad.data() + r * d;
        double gs = 0.0;
        for (std::size_t j = 0; j < d; ++j) gs += g[j];
        for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += g[j] - std::exp(y[j]) * gs;
      }
  });
}

/// log(sum(exp(x))) over the last axis; the axis is removed.
inline Tensor logsumexp_lastdim(const Tensor& a) {
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(rows);
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = ad.data() + r * d;
    double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(x[j] - mx);
    out[r] = mx + std::log(z);
  }
  return detail::make_result(std::move(out_shape), std::move(out), {a}, [rows, d](Node& self) {
    const auto& av = self.parents[0]->value;
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j)
          ga[r * d + j] += self.grad[r] * std::exp(av[r * d + j] - self.value[r]);
  });
}

/// Zero-mean unit-variance over the last axis (no affine part). A constant
/// row maps to the zero row.
inline Tensor layer_norm_lastdim(const Tensor& a, double eps = 1e-5) {
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(a.numel());
  std::vector<double> inv_std(rows);
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = ad.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (x[j] - mu) * inv_std[r];
  }
  return detail::make_result(
      a.shape(), std::move(out), {a}, [rows, d, inv_std = std::move(inv_std)](Node& self) {
        if (double* ga = detail::grad_of(self.parents[0]))
          for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * d;
            const double* g = self.grad.data() + r * d;
            double gm = 0.0, gy = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              gm += g[j];
              gy += g[j] * y[j];
            }
            gm /= static_cast<double>(d);
            gy /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j)
              ga[r * d + j] += inv_std[r] * (g[j] - gm - y[j] * gy);
          }
      });
}

/// x / (||x|| + eps) over the last axis.
inline Tensor l2_normalize_lastdim(const Tensor& a, double eps = 1e-12) {
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(a.numel());
  std::vector<double> norms(rows);
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += ad[r * d + j] * ad[r * d + j];
    norms[r] = std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = ad[r * d + j] / (norms[r] + eps);
  }
  return detail::make_result(
      a.shape(), std::move(out), {a}, [rows, d, eps, norms = std::move(norms)](Node& self) {
        const auto& av = self.parents[0]->value;
        if (double* ga = detail::grad_of(self.parents[0]))
          for (std::size_t r = 0; r < rows; ++r) {
            const double n = norms[r];
            const double denom = n + eps;
            const double* g = self.grad.data() + r * d;
            const double* x = av.data() + r * d;
            double gx = 0.0;
            for (std::size_t j = 0; j < d; ++j) gx += g[j] * x[j];
            const double coef = n > 0.0 ? gx / (n * denom * denom) : 0.0;
            for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += g[j] / denom - coef * x[j];
          }
      });
}

// ---------------------------------------------------------------------------
// Products

/// a[..., k] x w[k, m] -> [..., m]
inline Tensor matmul(const Tensor& a, const Tensor& w) {
  if (w.rank() != 2 || a.shape().back() != w.dim(0))
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(w.shape()));
  const std::size_t k = w.dim(0), m = w.dim(1), rows = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = m;
  std::vector<double> out(rows * m);
  detail::MapMat(out.data(), rows, m).noalias() =
      detail::CMapMat(a.data().data(), rows, k) * detail::CMapMat(w.data().data(), k, m);
  return detail::make_result(std::move(out_shape), std::move(out), {a, w}, [rows, k, m](Node& self) {
    detail::CMapMat g(self.grad.data(), rows, m);
    if (double* ga = detail::grad_of(self.parents[0]))
      detail::MapMat(ga, rows, k).noalias() +=
          g * detail::CMapMat(self.parents[1]->value.data(), k, m).transpose();
    if (double* gw = detail::grad_of(self.parents[1]))
      detail::MapMat(gw, k, m).noalias() +=
          detail::CMapMat(self.parents[0]->value.data(), rows, k).transpose() * g;
  });
}

/// Batched product a[B, n, k] x b[B, k, m] (or b[B, m, k] with trans_b).
inline Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t B = a.dim(0), n = a.dim(1), k = a.dim(2);
  const std::size_t bk = trans_b ? b.dim(2) : b.dim(1);
  const std::size_t m = trans_b ? b.dim(1) : b.dim(2);
  if (bk != k) throw ShapeError("bmm: inner dims differ");
  std::vector<double> out(B * n * m);
  for (std::size_t i = 0; i < B; ++i) {
    detail::CMapMat A(a.data().data() + i * n * k, n, k);
    detail::MapMat Y(out.data() + i * n * m, n, m);
    if (trans_b)
      Y.noalias() = A * detail::CMapMat(b.data().data() + i * m * k, m, k).transpose();
    else
      Y.noalias() = A * detail::CMapMat(b.data().data() + i * k * m, k, m);
  }
  return detail::make_result({B, n, m}, std::move(out), {a, b}, [B, n, k, m, trans_b](Node& self) {
    double* ga = detail::grad_of(self.parents[0]);
    double* gb = detail::grad_of(self.parents[1]);
    for (std::size_t i = 0; i < B; ++i) {
      detail::CMapMat G(self.grad.data() + i * n * m, n, m);
      detail::CMapMat A(self.parents[0]->value.data() + i * n * k, n, k);
      if (trans_b) {
        detail::CMapMat Bm(self.parents[1]->value.data() + i * m * k, m, k);
        if (ga) detail::MapMat(ga + i * n * k, n, k).noalias() += G * Bm;
        if (gb) detail::MapMat(gb + i * m * k, m, k).noalias() += G.transpose() * A;
      } else {
        detail::CMapMat Bm(self.parents[1]->value.data() + i * k * m, k, m);
        if (ga) detail::MapMat(ga + i * n * k, n, k).noalias() += G * Bm.transpose();
        if (gb) detail::MapMat(gb + i * k * m, k, m).noalias() += A.transpose() * G;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing. `gather` is the single primitive behind reshapes, permutes,
// slices, repeats and windowed (convolution) views: out[i] = a[idx[i]], with
// idx[i] < 0 producing a structural zero.

inline Tensor gather(const Tensor& a, Index idx, Shape out_shape) {
  if (numel(out_shape) != idx.size())
    throw ShapeError("gather: index count does not match " + shape_str(out_shape));
  const auto ad = a.data();
  const long limit = static_cast<long>(a.numel());
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= limit) throw ShapeError("gather: index out of range");
    out[i] = idx[i] < 0 ? 0.0 : ad[static_cast<std::size_t>(idx[i])];
  }
  return detail::make_result(std::move(out_shape), std::move(out), {a},
                             [idx = std::move(idx)](Node& self) {
                               if (double* ga = detail::grad_of(self.parents[0]))
                                 for (std::size_t i = 0; i < idx.size(); ++i)
                                   if (idx[i] >= 0) ga[idx[i]] += self.grad[i];
                             });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::make_result(std::move(shape), a.values(), {a}, [](Node& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

/// Generic axis permutation, out.shape[i] = a.shape[perm[i]].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const auto& s = a.shape();
  if (perm.size() != s.size()) throw ShapeError("permute: rank mismatch");
  Shape out_shape(s.size());
  std::vector<std::size_t> in_stride(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = s.at(perm[i]);
  Index idx(a.numel());
  std::vector<std::size_t> counter(s.size(), 0);
  for (std::size_t flat = 0; flat < idx.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < perm.size(); ++i) src += counter[i] * in_stride[perm[i]];
    idx[flat] = static_cast<long>(src);
    for (std::size_t i = perm.size(); i-- > 0;) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  return gather(a, std::move(idx), std::move(out_shape));
}

/// Selects entries `rows` along `axis`.
inline Tensor index_select(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& rows) {
  const auto& s = a.shape();
  if (axis >= s.size()) throw ShapeError("index_select: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = rows.size();
  Index idx;
  idx.reserve(outer * rows.size() * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r : rows) {
      if (r >= s[axis]) throw ShapeError("index_select: row out of range");
      for (std::size_t i = 0; i < inner; ++i)
        idx.push_back(static_cast<long>((o * s[axis] + r) * inner + i));
    }
  return gather(a, std::move(idx), std::move(out_shape));
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  std::vector<std::size_t> rows(len);
  std::iota(rows.begin(), rows.end(), start);
  return index_select(a, axis, rows);
}

/// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < out_shape.size(); ++i)
      if (i != axis && p.dim(i) != parts[0].dim(i)) throw ShapeError("concat: extent mismatch");
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = out_shape[axis] * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const auto pd = parts[p].data();
      std::copy_n(pd.begin() + o * widths[p], widths[p], out.begin() + o * row + off);
      off += widths[p];
    }
  }
  return detail::make_result(std::move(out_shape), std::move(out), parts,
                             [outer, row, widths](Node& self) {
                               std::size_t off = 0;
                               for (std::size_t p = 0; p < widths.size(); ++p) {
                                 if (double* gp = detail::grad_of(self.parents[p]))
                                   for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t i = 0; i < widths[p]; ++i)
                                       gp[o * widths[p] + i] += self.grad[o * row + off + i];
                                 off += widths[p];
                               }
                             });
}

/// [B, d] -> [B, n, d] by repeating each row n times.
inline Tensor repeat_rows(const Tensor& a, std::size_t n) {
  if (a.rank() != 2) throw ShapeError("repeat_rows: expects [B, d]");
  const std::size_t B = a.dim(0), d = a.dim(1);
  Index idx;
  idx.reserve(B * n * d);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) idx.push_back(static_cast<long>(b * d + j));
  return gather(a, std::move(idx), {B, n, d});
}

}  // namespace epiptrack::ag

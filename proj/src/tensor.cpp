// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include "idxshare/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace idxshare {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " +
                            shape_str(b)) {}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                           BackwardFn fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.defined() && p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node_);
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

detail::Node& Tensor::node() const {
  if (!node_) throw std::logic_error("use of undefined Tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }
std::size_t Tensor::numel() const { return node().data.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("dim: axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::rows() const {
  if (shape().size() != 2) throw ShapeError("rows: expected 2-D, got " + shape_str(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (shape().size() != 2) throw ShapeError("cols: expected 2-D, got " + shape_str(shape()));
  return shape()[1];
}

std::span<const double> Tensor::data() const { return node().data; }
std::span<double> Tensor::mutable_data() { return node().data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: expected one element, got " + shape_str(shape()));
  return node().data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return node().data[r * cols() + c]; }

bool Tensor::requires_grad() const { return node().requires_grad; }
void Tensor::set_requires_grad(bool flag) { node().requires_grad = flag; }
bool Tensor::has_grad() const { return !node().grad.empty(); }
std::span<const double> Tensor::grad() const { return node().grad; }

void Tensor::zero_grad() { node().grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got " + shape_str(shape()));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass; leaves accumulate.
  for (auto* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// ---- primitives ----------------------------------------------------------

namespace {

detail::Node& parent(detail::Node& out, std::size_t i) { return *out.parents[i]; }

bool wants_grad(detail::Node& out, std::size_t i) { return out.parents[i]->requires_grad; }

void require_2d(const char* op, const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeError(std::string(op) + ": expected 2-D, got " + shape_str(a.shape()));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

template <typename F, typename D>
Tensor unary(const Tensor& a, F forward, D derivative) {
  std::vector<double> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return Tensor::make_result(a.shape(), std::move(out), {a}, [derivative](detail::Node& o) {
    auto& x = parent(o, 0);
    auto& g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * derivative(x.data[i], o.data[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  if (a.cols() != b.rows()) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = &B[p * m];
      double* orow = &out[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return Tensor::make_result({n, m}, std::move(out), {a, b}, [n, k, m](detail::Node& o) {
    auto& an = parent(o, 0);
    auto& bn = parent(o, 1);
    if (an.requires_grad) {
      // dA = dO * B^T
      auto& ga = an.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += o.grad[i * m + j] * bn.data[p * m + j];
          ga[i * k + p] += s;
        }
    }
    if (bn.requires_grad) {
      // dB = A^T * dO
      auto& gb = bn.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = an.data[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * o.grad[i * m + j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_2d("transpose", a);
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  auto in = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  return Tensor::make_result({c, r}, std::move(out), {a}, [r, c](detail::Node& o) {
    auto& g = parent(o, 0).grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {a}, [](detail::Node& o) {
    auto& g = parent(o, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(o, p)) continue;
      auto& g = parent(o, p).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  require_2d("add_row", a);
  const std::size_t r = a.rows(), c = a.cols();
  if (bias.numel() != c) throw ShapeError("add_row", a.shape(), bias.shape());
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] + bias.data()[j];
  return Tensor::make_result(a.shape(), std::move(out), {a, bias}, [r, c](detail::Node& o) {
    if (wants_grad(o, 0)) {
      auto& g = parent(o, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants_grad(o, 1)) {
      auto& g = parent(o, 1).grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    if (wants_grad(o, 0)) {
      auto& g = parent(o, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants_grad(o, 1)) {
      auto& g = parent(o, 1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    auto& an = parent(o, 0);
    auto& bn = parent(o, 1);
    if (an.requires_grad) {
      auto& g = an.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn.data[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("scale_by", a.shape(), s.shape());
  const double sv = s.data()[0];
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
  return Tensor::make_result(a.shape(), std::move(out), {a, s}, [sv](detail::Node& o) {
    auto& an = parent(o, 0);
    if (an.requires_grad) {
      auto& g = an.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * sv;
    }
    if (wants_grad(o, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < an.data.size(); ++i) acc += o.grad[i] * an.data[i];
      parent(o, 1).grad_buffer()[0] += acc;
    }
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

namespace {

// Shared forward for softmax / log-softmax: returns log-probabilities.
std::vector<double> log_softmax_forward(const Tensor& a, const Tensor& mask) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  auto in = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      double v = in[i * c + j] + (mask.defined() ? mask.data()[i * c + j] : 0.0);
      out[i * c + j] = v;
      mx = std::max(mx, v);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(out[i * c + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] -= lse;
  }
  return out;
}

void check_mask(const char* op, const Tensor& a, const Tensor& mask) {
  require_2d(op, a);
  if (mask.defined()) {
    if (mask.shape() != a.shape()) throw ShapeError(op, a.shape(), mask.shape());
    if (mask.requires_grad()) throw std::invalid_argument(std::string(op) + ": mask must be constant");
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& a, const Tensor& mask) {
  check_mask("softmax_rows", a, mask);
  auto out = log_softmax_forward(a, mask);
  for (auto& v : out) v = std::exp(v);
  const std::size_t r = a.rows(), c = a.cols();
  return Tensor::make_result(a.shape(), std::move(out), {a}, [r, c](detail::Node& o) {
    auto& g = parent(o, 0).grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += o.grad[i * c + j] * o.data[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.data[i * c + j] * (o.grad[i * c + j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a, const Tensor& mask) {
  check_mask("log_softmax_rows", a, mask);
  auto out = log_softmax_forward(a, mask);
  const std::size_t r = a.rows(), c = a.cols();
  return Tensor::make_result(a.shape(), std::move(out), {a}, [r, c](detail::Node& o) {
    auto& g = parent(o, 0).grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += o.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * c + j] - std::exp(o.data[i * c + j]) * gs;
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result({1}, {s}, {a}, [](detail::Node& o) {
    auto& g = parent(o, 0).grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result({1}, {s / n}, {a}, [n](detail::Node& o) {
    auto& g = parent(o, 0).grad_buffer();
    for (auto& v : g) v += o.grad[0] / n;
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_2d("gather_rows", a);
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(index.size() * c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range for " + shape_str(a.shape()));
    std::copy_n(a.data().begin() + index[i] * c, c, out.begin() + i * c);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Tensor::make_result({index.size(), c}, std::move(out), {a}, [idx = std::move(idx), c](detail::Node& o) {
    auto& g = parent(o, 0).grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += o.grad[i * c + j];
  });
}

Tensor scatter_rows(const Tensor& a, std::span<const std::size_t> index, std::size_t rows) {
  require_2d("scatter_rows", a);
  const std::size_t c = a.cols();
  if (index.size() != a.rows()) throw ShapeError("scatter_rows: index length " + std::to_string(index.size()) + " vs " + shape_str(a.shape()));
  std::vector<double> out(rows * c, 0.0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw ShapeError("scatter_rows: index " + std::to_string(index[i]) + " out of range for " + std::to_string(rows) + " rows");
    for (std::size_t j = 0; j < c; ++j) out[index[i] * c + j] += a.data()[i * c + j];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Tensor::make_result({rows, c}, std::move(out), {a}, [idx = std::move(idx), c](detail::Node& o) {
    auto& g = parent(o, 0).grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[idx[i] * c + j];
  });
}

Tensor gather_elements(const Tensor& a, std::span<const std::size_t> rows,
                       std::span<const std::size_t> cols) {
  require_2d("gather_elements", a);
  if (rows.size() != cols.size()) throw ShapeError("gather_elements: row/col index lengths differ");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<std::size_t> flat(rows.size());
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r || cols[i] >= c) throw ShapeError("gather_elements: index out of range for " + shape_str(a.shape()));
    flat[i] = rows[i] * c + cols[i];
    out[i] = a.data()[flat[i]];
  }
  return Tensor::make_result({rows.size()}, std::move(out), {a}, [flat = std::move(flat)](detail::Node& o) {
    auto& g = parent(o, 0).grad_buffer();
    for (std::size_t i = 0; i < flat.size(); ++i) g[flat[i]] += o.grad[i];
  });
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d("layer_norm_rows", a);
  const std::size_t r = a.rows(), c = a.cols();
  if (gain.numel() != c) throw ShapeError("layer_norm_rows", a.shape(), gain.shape());
  if (bias.numel() != c) throw ShapeError("layer_norm_rows", a.shape(), bias.shape());
  std::vector<double> xhat(r * c), inv_std(r), out(r * c);
  auto in = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += in[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = in[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (in[i * c + j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return Tensor::make_result(
      a.shape(), std::move(out), {a, gain, bias},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& o) {
        auto& gn = parent(o, 1);
        if (wants_grad(o, 1)) {
          auto& g = gn.grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j] * xhat[i * c + j];
        }
        if (wants_grad(o, 2)) {
          auto& g = parent(o, 2).grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
        }
        if (wants_grad(o, 0)) {
          auto& g = parent(o, 0).grad_buffer();
          const double n = static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = o.grad[i * c + j] * gn.data[j];
              sum_d += d;
              sum_dx += d * xhat[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const double d = o.grad[i * c + j] * gn.data[j];
              g[i * c + j] += inv_std[i] * (d - sum_d / n - xhat[i * c + j] * sum_dx / n);
            }
          }
        }
      });
}

Tensor detach(const Tensor& a) {
  return Tensor::from(a.shape(), std::vector<double>(a.data().begin(), a.data().end()), false);
}

}  // namespace idxshare

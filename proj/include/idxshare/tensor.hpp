// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major f64 tensors with reverse-mode autodiff.
//
// Every op returns a new Tensor. When grad mode is on and any input requires
// grad, the result keeps shared references to its inputs plus a closure that
// pushes the result's gradient back into them. The graph reachable from a
// scalar root is the tape that backward() replays in reverse topological
// order. Graphs share no mutable state, so independent graphs may be built
// and differentiated on different threads.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace idxshare {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

namespace detail {
struct Node;
}

class Tensor;

// Receives the gradient of an op's output and accumulates into its inputs.
// `out` is the output node; inputs are out.parents in construction order.
using BackwardFn = std::function<void(detail::Node& out)>;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  // Returns grad, allocating zeros on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  // Builds an op result. The node records `parents` and `fn` only when grad
  // mode is on and at least one parent requires grad.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> parents, BackwardFn fn);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;
  // 2-D convenience accessors; throw on other ranks.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  // Direct write access for optimizers and initializers. Mutating a tensor
  // that is already part of a recorded graph invalidates that graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  // Populates .grad on every requires_grad tensor reachable from this one.
  // Requires a single-element root. Leaf gradients accumulate across calls.
  void backward() const;

  // Structural identity (same underlying node).
  bool same(const Tensor& other) const { return node_ == other.node_; }

  detail::Node& node() const;
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Grad recording is on by default per thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Additive mask value for excluded softmax entries. Finite so gradients
// through masked rows stay NaN-free.
inline constexpr double kMaskedLogit = -1e30;

// ---- primitives ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
// a is R x C, bias has C elements; bias is added to every row.
Tensor add_row(const Tensor& a, const Tensor& bias);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Multiplies every element of a by the single element of s.
Tensor scale_by(const Tensor& a, const Tensor& s);
Tensor add_scalar(const Tensor& a, double value);

Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// Row-wise softmax of a 2-D tensor. `mask`, when defined, is a constant of
// the same shape added before normalization (use kMaskedLogit to exclude).
Tensor softmax_rows(const Tensor& a, const Tensor& mask = {});
Tensor log_softmax_rows(const Tensor& a, const Tensor& mask = {});

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// out[i] = a[index[i]] (rows of a 2-D tensor); backward scatter-adds.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
// out has `rows` rows, out[index[i]] += a[i]; backward gathers.
Tensor scatter_rows(const Tensor& a, std::span<const std::size_t> index, std::size_t rows);
// out[i] = a[rows[i], cols[i]] as a 1-D tensor.
Tensor gather_elements(const Tensor& a, std::span<const std::size_t> rows,
                       std::span<const std::size_t> cols);

// Per-row normalization over the last axis with learned gain and bias.
Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);

// Same values, no gradient path to a's producers.
Tensor detach(const Tensor& a);

}  // namespace idxshare

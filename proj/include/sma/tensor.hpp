#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sma {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

// One vertex of the differentiation graph. Leaves have an empty `op`.
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<double>> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until backward reaches this node
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads `self.grad` and accumulates into the grads of `self.inputs`.
  std::function<void(Node& self)> backward_fn;
};

}  // namespace detail

/// Dense row-major f64 array with an optional reverse-mode graph record.
///
/// A Tensor is a cheap handle: copies alias the same node. Operations are
/// free functions below; an operation records its producer only when at
/// least one input requires a gradient, so inference-only passes build no
/// graph at all.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> values() const;
  // Writes bypass the graph; only meant for leaves (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void clear_grad();

  bool is_leaf() const;
  const std::string& op() const;

  /// Populates grad of every reachable tensor that requires it. The receiver
  /// must hold exactly one element.
  void backward() const;

  // Internal: used by operation implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  bool shares_values_with(const Tensor& other) const;

 private:
  std::shared_ptr<detail::Node> node_;
};

// Elementwise. `add` also accepts a 1-D right operand matching the last axis
// of the left operand (bias broadcast); every other binary op needs equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

// 2-D (m×k · k×n) or batched 3-D (N×m×k · N×k×n).
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax_over_axis(const Tensor& a, std::size_t axis);
// Removes `axis`.
Tensor mean_over_axis(const Tensor& a, std::size_t axis);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor concat_over_axis(const std::vector<Tensor>& parts, std::size_t axis);

// Row i of the result is row indices[i] of `a` (axis 0).
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices);

// Row-wise cosine similarity of two N×C tensors, norms clamped below at eps.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-7);

// x: N×Ci×H×W, weight: Co×Ci×kh×kw, bias: Co or undefined. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);
// Non-overlapping k×k mean pooling; H and W must be divisible by k.
Tensor avg_pool2d(const Tensor& x, std::size_t k);

// Same values, no producer record, never requires grad.
Tensor detach(const Tensor& t);

}  // namespace sma

#include "sma/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "sma/errors.hpp"

namespace sma {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw ContractViolation(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const std::string& why) {
  throw ContractViolation(op + ": shape " + to_string(a) + " " + why);
}

NodePtr make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ContractViolation("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (numel(shape) != values.size()) {
    throw ContractViolation("tensor of shape " + to_string(shape) + " needs " +
                            std::to_string(numel(shape)) + " values, got " +
                            std::to_string(values.size()));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::make_shared<std::vector<double>>(std::move(values));
  n->requires_grad = requires_grad;
  return n;
}

std::vector<double>& grad_of(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.values->size(), 0.0);
  return n.grad;
}

// Builds an op result; records the producer only if some input needs a gradient.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<NodePtr> inputs,
                   std::string op, std::function<void(Node&)> backward_fn) {
  auto n = make_leaf(std::move(shape), std::move(values), false);
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const NodePtr& p) { return p && p->requires_grad; });
  if (needs) {
    n->requires_grad = true;
    n->op = std::move(op);
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

const std::vector<double>& vals(const Tensor& t) { return *t.node()->values; }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractViolation(std::string(op) + ": undefined tensor");
}

template <class F>
Tensor unary(const Tensor& a, const char* op, F&& fn,
             std::function<void(Node&)> backward_fn) {
  require_defined(a, op);
  const auto& x = vals(a);
  std::vector<double> out(x.size());
  std::transform(x.begin(), x.end(), out.begin(), fn);
  return make_result(a.shape(), std::move(out), {a.node()}, op, std::move(backward_fn));
}

// row-major C(m×n) (+)= op(A) op(B)
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C = op(A) · op(B) + beta · C, all row-major; op(A) is m×k and op(B) is k×n.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, double beta) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  Eigen::Map<RowMajor> out(c, M, N);
  if (beta == 0.0) out.setZero();
  else if (beta != 1.0) out *= beta;
  Eigen::Map<const RowMajor> a_plain(a, M, K), a_stored_t(a, K, M);
  Eigen::Map<const RowMajor> b_plain(b, K, N), b_stored_t(b, N, K);
  if (!trans_a && !trans_b) out.noalias() += a_plain * b_plain;
  else if (!trans_a) out.noalias() += a_plain * b_stored_t.transpose();
  else if (!trans_b) out.noalias() += a_stored_t.transpose() * b_plain;
  else out.noalias() += a_stored_t.transpose() * b_stored_t.transpose();
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor handle

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = sma::numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = sma::numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) shape_error("dim", shape(), "has no axis " + std::to_string(axis));
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->values->size() : 0; }

std::span<const double> Tensor::values() const {
  require_defined(*this, "values");
  return *node_->values;
}

std::span<double> Tensor::mutable_values() {
  require_defined(*this, "mutable_values");
  return *node_->values;
}

double Tensor::item() const {
  if (numel() != 1) shape_error("item", shape(), "is not a single element");
  return (*node_->values)[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  require_defined(*this, "set_requires_grad");
  if (!is_leaf()) throw ContractViolation("set_requires_grad: only leaves can be toggled");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractViolation("grad: tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  return grad_of(*node_);
}

void Tensor::clear_grad() {
  if (node_) std::vector<double>().swap(node_->grad);
}

bool Tensor::is_leaf() const { return !node_ || node_->op.empty(); }

const std::string& Tensor::op() const {
  require_defined(*this, "op");
  return node_->op;
}

bool Tensor::shares_values_with(const Tensor& other) const {
  return node_ && other.node_ && node_->values == other.node_->values;
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1) shape_error("backward", shape(), "is not a scalar loss");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; reversed it is a topological order from the root.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  grad_of(*node_)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  const auto& x = vals(a);
  const auto& y = vals(b);
  if (a.shape() == b.shape()) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, "add", [](Node& self) {
      for (auto& in : self.inputs) {
        if (!in->requires_grad) continue;
        auto& g = grad_of(*in);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    });
  }
  if (b.rank() == 1 && a.shape().back() == b.dim(0)) {
    const std::size_t width = b.dim(0);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i % width];
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, "add",
                       [width](Node& self) {
                         if (self.inputs[0]->requires_grad) {
                           auto& g = grad_of(*self.inputs[0]);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                         }
                         if (self.inputs[1]->requires_grad) {
                           auto& g = grad_of(*self.inputs[1]);
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             g[i % width] += self.grad[i];
                         }
                       });
  }
  shape_error("add", a.shape(), b.shape());
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  const auto& x = vals(a);
  const auto& y = vals(b);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, "sub", [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!in->requires_grad) continue;
      auto& g = grad_of(*in);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  const auto& x = vals(a);
  const auto& y = vals(b);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, "mul", [](Node& self) {
    auto& l = *self.inputs[0];
    auto& r = *self.inputs[1];
    if (l.requires_grad) {
      auto& g = grad_of(l);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*r.values)[i];
    }
    if (r.requires_grad) {
      auto& g = grad_of(r);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*l.values)[i];
    }
  });
}

Tensor scalar_mul(const Tensor& a, double s) {
  return unary(a, "scalar_mul", [s](double v) { return s * v; }, [s](Node& self) {
    auto& g = grad_of(*self.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double v) { return v + s; }, [](Node& self) {
    auto& g = grad_of(*self.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  return unary(a, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](Node& self) {
    auto& in = *self.inputs[0];
    auto& g = grad_of(in);
    for (std::size_t i = 0; i < g.size(); ++i)
      if ((*in.values)[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](Node& self) {
    auto& g = grad_of(*self.inputs[0]);
    const auto& y = *self.values;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  for (double v : vals(a)) {
    if (!(v > 0.0)) throw ContractViolation("log: non-positive input " + std::to_string(v));
  }
  return unary(a, "log", [](double v) { return std::log(v); }, [](Node& self) {
    auto& in = *self.inputs[0];
    auto& g = grad_of(in);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / (*in.values)[i];
  });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary(a, "clamp_min", [lo](double v) { return v < lo ? lo : v; }, [lo](Node& self) {
    auto& in = *self.inputs[0];
    auto& g = grad_of(in);
    for (std::size_t i = 0; i < g.size(); ++i)
      if ((*in.values)[i] >= lo) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || (batched && sb.size() == 3 && sa[0] == sb[0])) ||
      sa[sa.size() - 1] != sb[sb.size() - 2]) {
    shape_error("matmul", sa, sb);
  }
  const std::size_t batch = batched ? sa[0] : 1;
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  std::vector<double> out(batch * m * n);
  for (std::size_t p = 0; p < batch; ++p) {
    gemm(false, false, m, n, k, vals(a).data() + p * m * k, vals(b).data() + p * k * n,
         out.data() + p * m * n, 0.0);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return make_result(std::move(shape), std::move(out), {a.node(), b.node()}, "matmul",
                     [batch, m, n, k](Node& self) {
                       auto& l = *self.inputs[0];
                       auto& r = *self.inputs[1];
                       for (std::size_t p = 0; p < batch; ++p) {
                         const double* dc = self.grad.data() + p * m * n;
                         if (l.requires_grad)  // dA = dC · Bᵀ
                           gemm(false, true, m, k, n, dc, r.values->data() + p * k * n,
                                grad_of(l).data() + p * m * k, 1.0);
                         if (r.requires_grad)  // dB = Aᵀ · dC
                           gemm(true, false, k, n, m, l.values->data() + p * m * k, dc,
                                grad_of(r).data() + p * k * n, 1.0);
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  const auto& s = a.shape();
  if (s.size() != 2 && s.size() != 3) shape_error("transpose", s, "must be rank 2 or 3");
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t rows = s[s.size() - 2], cols = s.back();
  const auto& x = vals(a);
  std::vector<double> out(x.size());
  for (std::size_t p = 0; p < batch; ++p)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        out[p * rows * cols + j * rows + i] = x[p * rows * cols + i * cols + j];
  Shape shape = s;
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return make_result(std::move(shape), std::move(out), {a.node()}, "transpose",
                     [batch, rows, cols](Node& self) {
                       auto& g = grad_of(*self.inputs[0]);
                       for (std::size_t p = 0; p < batch; ++p)
                         for (std::size_t i = 0; i < rows; ++i)
                           for (std::size_t j = 0; j < cols; ++j)
                             g[p * rows * cols + i * cols + j] +=
                                 self.grad[p * rows * cols + j * rows + i];
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  std::vector<double> out(vals(a));
  return make_result(std::move(shape), std::move(out), {a.node()}, "reshape", [](Node& self) {
    auto& g = grad_of(*self.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor softmax_over_axis(const Tensor& a, std::size_t axis) {
  require_defined(a, "softmax_over_axis");
  if (axis >= a.rank()) shape_error("softmax_over_axis", a.shape(), "has no axis " + std::to_string(axis));
  const auto sp = split_at(a.shape(), axis);
  const auto& x = vals(a);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double mx = x[base];
      for (std::size_t e = 1; e < sp.extent; ++e) mx = std::max(mx, x[base + e * sp.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        double v = std::exp(x[base + e * sp.inner] - mx);
        out[base + e * sp.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= total;
    }
  }
  return make_result(a.shape(), std::move(out), {a.node()}, "softmax_over_axis", [sp](Node& self) {
    auto& g = grad_of(*self.inputs[0]);
    const auto& y = *self.values;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.extent * sp.inner + in;
        double dot = 0.0;
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t i = base + e * sp.inner;
          dot += self.grad[i] * y[i];
        }
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t i = base + e * sp.inner;
          g[i] += y[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor mean_over_axis(const Tensor& a, std::size_t axis) {
  require_defined(a, "mean_over_axis");
  if (axis >= a.rank()) shape_error("mean_over_axis", a.shape(), "has no axis " + std::to_string(axis));
  const auto sp = split_at(a.shape(), axis);
  const auto& x = vals(a);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t in = 0; in < sp.inner; ++in)
        out[o * sp.inner + in] += x[(o * sp.extent + e) * sp.inner + in];
  for (auto& v : out) v /= static_cast<double>(sp.extent);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  return make_result(std::move(shape), std::move(out), {a.node()}, "mean_over_axis", [sp](Node& self) {
    auto& g = grad_of(*self.inputs[0]);
    const double scale = 1.0 / static_cast<double>(sp.extent);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < sp.extent; ++e)
        for (std::size_t in = 0; in < sp.inner; ++in)
          g[(o * sp.extent + e) * sp.inner + in] += scale * self.grad[o * sp.inner + in];
  });
}

// Reductions accumulate in long double, so the mean of n identical values is
// that value exactly for any realistic n.
Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  const auto& x = vals(a);
  const long double total = std::accumulate(x.begin(), x.end(), 0.0L);
  return make_result({1}, {static_cast<double>(total)}, {a.node()}, "sum", [](Node& self) {
    auto& g = grad_of(*self.inputs[0]);
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  const auto& x = vals(a);
  const long double n = static_cast<long double>(x.size());
  const long double total = std::accumulate(x.begin(), x.end(), 0.0L);
  return make_result({1}, {static_cast<double>(total / n)}, {a.node()}, "mean", [](Node& self) {
    auto& g = grad_of(*self.inputs[0]);
    const double share = self.grad[0] / static_cast<double>(g.size());
    for (auto& v : g) v += share;
  });
}

Tensor concat_over_axis(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractViolation("concat_over_axis: no inputs");
  for (const auto& p : parts) require_defined(p, "concat_over_axis");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) shape_error("concat_over_axis", first, "has no axis " + std::to_string(axis));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) shape_error("concat_over_axis", first, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) shape_error("concat_over_axis", first, s);
    shape[axis] += s[axis];
  }
  const auto sp = split_at(shape, axis);
  std::vector<double> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    const std::size_t ext = p.dim(axis);
    const auto& x = vals(p);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.data() + o * ext * sp.inner, ext * sp.inner,
                  out.data() + (o * sp.extent + offset) * sp.inner);
    offsets.push_back(offset);
    offset += ext;
    inputs.push_back(p.node());
  }
  return make_result(std::move(shape), std::move(out), std::move(inputs), "concat_over_axis",
                     [sp, offsets, axis](Node& self) {
                       for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                         auto& in = *self.inputs[k];
                         if (!in.requires_grad) continue;
                         auto& g = grad_of(in);
                         const std::size_t ext = in.shape[axis];
                         for (std::size_t o = 0; o < sp.outer; ++o) {
                           const double* src =
                               self.grad.data() + (o * sp.extent + offsets[k]) * sp.inner;
                           double* dst = g.data() + o * ext * sp.inner;
                           for (std::size_t i = 0; i < ext * sp.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  require_defined(a, "gather_rows");
  const std::size_t rows = a.dim(0);
  const std::size_t width = a.numel() / rows;
  for (auto i : indices)
    if (i >= rows) shape_error("gather_rows", a.shape(), "has no row " + std::to_string(i));
  if (indices.empty()) throw ContractViolation("gather_rows: empty index list");
  const auto& x = vals(a);
  std::vector<double> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(x.data() + indices[r] * width, width, out.data() + r * width);
  Shape shape = a.shape();
  shape[0] = indices.size();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(std::move(shape), std::move(out), {a.node()}, "gather_rows",
                     [idx = std::move(idx), width](Node& self) {
                       auto& g = grad_of(*self.inputs[0]);
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t c = 0; c < width; ++c)
                           g[idx[r] * width + c] += self.grad[r * width + c];
                     });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps) {
  require_defined(a, "cosine_similarity");
  require_defined(b, "cosine_similarity");
  if (a.shape() != b.shape() || a.rank() != 2) shape_error("cosine_similarity", a.shape(), b.shape());
  const std::size_t rows = a.dim(0), width = a.dim(1);
  const auto& x = vals(a);
  const auto& y = vals(b);
  std::vector<double> out(rows), norm_a(rows), norm_b(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t c = 0; c < width; ++c) {
      dot += x[r * width + c] * y[r * width + c];
      na += x[r * width + c] * x[r * width + c];
      nb += y[r * width + c] * y[r * width + c];
    }
    norm_a[r] = std::sqrt(na);
    norm_b[r] = std::sqrt(nb);
    out[r] = dot / (std::max(norm_a[r], eps) * std::max(norm_b[r], eps));
  }
  return make_result({rows}, std::move(out), {a.node(), b.node()}, "cosine_similarity",
                     [rows, width, eps, norm_a, norm_b](Node& self) {
                       auto& l = *self.inputs[0];
                       auto& r = *self.inputs[1];
                       for (std::size_t i = 0; i < rows; ++i) {
                         const double ca = std::max(norm_a[i], eps);
                         const double cb = std::max(norm_b[i], eps);
                         const double cos = (*self.values)[i];
                         const double g = self.grad[i];
                         const double* xa = l.values->data() + i * width;
                         const double* xb = r.values->data() + i * width;
                         // d cos / da = b/(|a||b|) - cos a/|a|^2, the second term only when unclamped
                         if (l.requires_grad) {
                           double* ga = grad_of(l).data() + i * width;
                           const double radial = norm_a[i] > eps ? cos / (ca * ca) : 0.0;
                           for (std::size_t c = 0; c < width; ++c)
                             ga[c] += g * (xb[c] / (ca * cb) - radial * xa[c]);
                         }
                         if (r.requires_grad) {
                           double* gb = grad_of(r).data() + i * width;
                           const double radial = norm_b[i] > eps ? cos / (cb * cb) : 0.0;
                           for (std::size_t c = 0; c < width; ++c)
                             gb[c] += g * (xa[c] / (ca * cb) - radial * xb[c]);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::size_t channels, height, width, kernel_h, kernel_w, stride, padding, out_h, out_w;
  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
};

// Output columns [lo, hi) of kernel offset k read inside the input row; the
// rest fall in the zero padding.
std::pair<std::size_t, std::size_t> valid_columns(std::size_t k, std::size_t stride, std::size_t padding,
                                                  std::size_t in, std::size_t out) {
  const std::size_t lo = k >= padding ? 0 : (padding - k + stride - 1) / stride;
  if (in + padding < k + 1) return {lo, lo};
  const std::size_t hi = std::min(out, (in + padding - k - 1) / stride + 1);
  return {std::min(lo, hi), hi};
}

void im2col(const ConvGeometry& g, const double* image, double* cols) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        double* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * positions;
        const auto [lo, hi] = valid_columns(kj, g.stride, g.padding, g.width, g.out_w);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          double* dst = row + oy * g.out_w;
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          std::fill(dst, dst + lo, 0.0);
          std::fill(dst + hi, dst + g.out_w, 0.0);
          if (lo == hi) continue;
          const double* src = plane + static_cast<std::size_t>(iy) * g.width + (lo * g.stride + kj - g.padding);
          if (g.stride == 1)
            std::copy(src, src + (hi - lo), dst + lo);
          else
            for (std::size_t ox = lo; ox < hi; ++ox, src += g.stride) dst[ox] = *src;
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* cols, double* image) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const double* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * positions;
        const auto [lo, hi] = valid_columns(kj, g.stride, g.padding, g.width, g.out_w);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) || lo == hi) continue;
          const double* src = row + oy * g.out_w;
          double* dst = plane + static_cast<std::size_t>(iy) * g.width + (lo * g.stride + kj - g.padding);
          for (std::size_t ox = lo; ox < hi; ++ox, dst += g.stride) *dst += src[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1]) shape_error("conv2d", sx, sw);
  if (stride == 0) throw ContractViolation("conv2d: stride must be positive");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != sw[0]))
    shape_error("conv2d", sw, bias.shape());
  if (sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3])
    shape_error("conv2d", sx, "is smaller than the kernel " + to_string(sw));

  ConvGeometry g{sx[1], sx[2], sx[3], sw[2], sw[3], stride, padding, 0, 0};
  g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;
  const std::size_t batch = sx[0], out_c = sw[0];
  const std::size_t patch = g.patch(), positions = g.positions();
  const std::size_t in_size = g.channels * g.height * g.width;

  // Column buffers are kept only when the weight gradient will be needed.
  const bool keep_cols = weight.requires_grad();
  auto cols = std::make_shared<std::vector<double>>(keep_cols ? batch * patch * positions
                                                              : patch * positions);
  std::vector<double> out(batch * out_c * positions);
  const auto& xv = vals(x);
  const auto& wv = vals(weight);
  for (std::size_t n = 0; n < batch; ++n) {
    double* c = cols->data() + (keep_cols ? n * patch * positions : 0);
    im2col(g, xv.data() + n * in_size, c);
    double* o = out.data() + n * out_c * positions;
    gemm(false, false, out_c, positions, patch, wv.data(), c, o, 0.0);
    if (bias.defined()) {
      const auto& bv = vals(bias);
      for (std::size_t oc = 0; oc < out_c; ++oc)
        for (std::size_t p = 0; p < positions; ++p) o[oc * positions + p] += bv[oc];
    }
  }
  if (!keep_cols) cols.reset();

  std::vector<NodePtr> inputs{x.node(), weight.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  return make_result(
      {batch, out_c, g.out_h, g.out_w}, std::move(out), std::move(inputs), "conv2d",
      [g, batch, out_c, in_size, cols](Node& self) {
        auto& xin = *self.inputs[0];
        auto& w = *self.inputs[1];
        const std::size_t patch = g.patch(), positions = g.positions();
        std::vector<double> dcols(xin.requires_grad ? patch * positions : 0);
        for (std::size_t n = 0; n < batch; ++n) {
          const double* dy = self.grad.data() + n * out_c * positions;
          if (w.requires_grad)  // dW += dY · colsᵀ
            gemm(false, true, out_c, patch, positions, dy, cols->data() + n * patch * positions,
                 grad_of(w).data(), 1.0);
          if (xin.requires_grad) {  // dX = col2im(Wᵀ · dY)
            gemm(true, false, patch, positions, out_c, w.values->data(), dy, dcols.data(), 0.0);
            col2im(g, dcols.data(), grad_of(xin).data() + n * in_size);
          }
          if (self.inputs.size() == 3 && self.inputs[2]->requires_grad) {
            auto& gb = grad_of(*self.inputs[2]);
            for (std::size_t oc = 0; oc < out_c; ++oc)
              for (std::size_t p = 0; p < positions; ++p) gb[oc] += dy[oc * positions + p];
          }
        }
      });
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  require_defined(x, "avg_pool2d");
  const auto& s = x.shape();
  if (s.size() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0)
    shape_error("avg_pool2d", s, "is not divisible into " + std::to_string(k) + "x" + std::to_string(k) + " cells");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / k, ow = w / k;
  const double scale = 1.0 / static_cast<double>(k * k);
  const auto& xv = vals(x);
  std::vector<double> out(planes * oh * ow, 0.0);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out[(p * oh + y / k) * ow + xx / k] += scale * xv[(p * h + y) * w + xx];
  return make_result({s[0], s[1], oh, ow}, std::move(out), {x.node()}, "avg_pool2d",
                     [planes, h, w, k, oh, ow, scale](Node& self) {
                       auto& g = grad_of(*self.inputs[0]);
                       for (std::size_t p = 0; p < planes; ++p)
                         for (std::size_t y = 0; y < h; ++y)
                           for (std::size_t xx = 0; xx < w; ++xx)
                             g[(p * h + y) * w + xx] += scale * self.grad[(p * oh + y / k) * ow + xx / k];
                     });
}

Tensor detach(const Tensor& t) {
  require_defined(t, "detach");
  auto n = std::make_shared<Node>();
  n->shape = t.shape();
  n->values = t.node()->values;
  return Tensor(std::move(n));
}

}  // namespace sma

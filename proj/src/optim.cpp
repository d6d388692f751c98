#include "sma/optim.hpp"

#include <cmath>

#include "sma/errors.hpp"

namespace sma {

Parameter::Parameter(std::string name, Tensor tensor)
    : name(std::move(name)), tensor(std::move(tensor)) {
  this->tensor.set_requires_grad(true);
  momentum_buffer.assign(this->tensor.numel(), 0.0);
}

void sgd_step(std::span<Parameter> params, double lr, double momentum) {
  if (!(lr > 0.0)) throw ContractViolation("sgd_step: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ContractViolation("sgd_step: momentum must be in [0,1)");
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw ContractViolation("sgd_step: parameter '" + p.name + "' has no gradient");
  }
  for (auto& p : params) {
    auto values = p.tensor.mutable_values();
    auto grad = p.tensor.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      p.momentum_buffer[i] = momentum * p.momentum_buffer[i] + grad[i];
      values[i] -= lr * p.momentum_buffer[i];
    }
    p.tensor.clear_grad();
  }
}

double clip_grad_norm(std::span<Parameter> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (double& g : p.tensor.mutable_grad()) g *= scale;
  }
  return norm;
}

double poly_lr(double base_lr, std::size_t iter, std::size_t max_iter, double power) {
  if (max_iter == 0 || iter > max_iter) throw ContractViolation("poly_lr: iter must be in [0, max_iter]");
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
  return base_lr * std::pow(frac, power);
}

}  // namespace sma

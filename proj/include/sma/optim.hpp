#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sma/tensor.hpp"

namespace sma {

struct Parameter {
  std::string name;
  Tensor tensor;  // leaf, requires_grad
  std::vector<double> momentum_buffer;

  Parameter(std::string name, Tensor tensor);
};

/// Heavy-ball SGD: buf = momentum*buf + grad; value -= lr*buf; grad cleared.
/// Every parameter must carry a gradient.
void sgd_step(std::span<Parameter> params, double lr, double momentum);

/// Rescales all gradients so their joint L2 norm is at most max_norm; returns
/// the norm before clipping. max_norm <= 0 leaves gradients untouched.
double clip_grad_norm(std::span<Parameter> params, double max_norm);

/// base_lr * (1 - iter/max_iter)^power.
double poly_lr(double base_lr, std::size_t iter, std::size_t max_iter, double power = 0.9);

}  // namespace sma

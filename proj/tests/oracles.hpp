#pragma once

// Test-only reference implementations. Nothing here calls into the tensor
// engine's arithmetic; the oracles work on plain vectors.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "sma/tensor.hpp"

namespace sma::testing {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double lo = -1.0,
                            double hi = 1.0) {
  auto n = sma::numel(shape);
  return Tensor::from(std::move(shape), random_values(n, rng, lo, hi), requires_grad);
}

// Direct nested-loop convolution, zero padding. x: N×Ci×H×W, w: Co×Ci×kh×kw.
inline std::vector<double> conv2d_reference(const std::vector<double>& x, const Shape& xs,
                                            const std::vector<double>& w, const Shape& ws,
                                            const std::vector<double>& b, std::size_t stride, std::size_t pad) {
  const std::size_t n = xs[0], ci = xs[1], h = xs[2], wd = xs[3], co = ws[0], kh = ws[2], kw = ws[3];
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * co * oh * ow, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x0 = 0; x0 < ow; ++x0) {
          double acc = b.empty() ? 0.0 : b[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(x0 * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += x[((s * ci + c) * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] *
                       w[((o * ci + c) * kh + i) * kw + j];
              }
          out[((s * co + o) * oh + y) * ow + x0] = acc;
        }
  return out;
}

// Reduces any output to a scalar through a fixed random projection so every
// output element contributes to the checked gradient.
inline Tensor project_to_scalar(const Tensor& out, std::uint64_t seed = 99) {
  if (out.numel() == 1) return out;
  std::mt19937_64 rng(seed);
  Tensor weights = Tensor::from(out.shape(), random_values(out.numel(), rng));
  return sum(mul(out, weights));
}

inline constexpr double kGradNormFloor = 1e-3;

struct GradCheck {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

/// Compares analytic gradients of `f` at `inputs` with central differences
/// (step h). Error per input is ||analytic - numeric||_2 / max(||analytic||, ||numeric||, kGradNormFloor);
/// the floor makes the check absolute for gradients that are zero by construction,
/// where the numeric side is only rounding noise.
inline GradCheck gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                           double h = 1e-5) {
  for (auto& t : inputs) t.clear_grad();
  Tensor loss = project_to_scalar(f(inputs));
  loss.backward();
  GradCheck result;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.numel());
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + h;
      const double up = project_to_scalar(f(inputs)).item();
      v[i] = orig - h;
      const double down = project_to_scalar(f(inputs)).item();
      v[i] = orig;
      numeric[i] = (up - down) / (2 * h);
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double scale = std::max(std::sqrt(std::max(na, nn)), kGradNormFloor);
    result.max_relative_error = std::max(result.max_relative_error, std::sqrt(diff) / scale);
    ++result.checked;
  }
  for (auto& t : inputs) t.clear_grad();
  return result;
}

/// Like gradcheck, but perturbs only `per_tensor` randomly chosen entries of
/// each tensor; for graphs with too many parameters to difference exhaustively.
/// `loss` must return a scalar.
inline GradCheck gradcheck_sampled(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                   std::size_t per_tensor, std::mt19937_64& rng, double h = 1e-5) {
  for (auto& t : params) t.clear_grad();
  loss().backward();
  GradCheck result;
  for (auto& t : params) {
    std::vector<double> analytic, numeric;
    auto v = t.mutable_values();
    std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
    for (std::size_t s = 0; s < std::min(per_tensor, v.size()); ++s) {
      const std::size_t i = pick(rng);
      analytic.push_back(t.has_grad() ? t.grad()[i] : 0.0);
      const double orig = v[i];
      v[i] = orig + h;
      const double up = loss().item();
      v[i] = orig - h;
      const double down = loss().item();
      v[i] = orig;
      numeric.push_back((up - down) / (2 * h));
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double scale = std::max(std::sqrt(std::max(na, nn)), kGradNormFloor);
    result.max_relative_error = std::max(result.max_relative_error, std::sqrt(diff) / scale);
    ++result.checked;
  }
  for (auto& t : params) t.clear_grad();
  return result;
}

// Plain-double sigmoid BCE, mean over all entries, log arguments floored at eps.
inline double bce_reference(const std::vector<double>& logits, const std::vector<double>& targets, double eps) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    total += targets[i] * std::log(std::max(p, eps)) + (1.0 - targets[i]) * std::log(std::max(1.0 - p, eps));
  }
  return -total / static_cast<double>(logits.size());
}

inline double contrastive_reference(const std::vector<double>& a, const std::vector<double>& b, std::size_t rows,
                                    double eps) {
  const std::size_t width = a.size() / rows;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t c = 0; c < width; ++c) {
      dot += a[r * width + c] * b[r * width + c];
      na += a[r * width + c] * a[r * width + c];
      nb += b[r * width + c] * b[r * width + c];
    }
    const double cos = dot / (std::max(std::sqrt(na), eps) * std::max(std::sqrt(nb), eps));
    total += std::log(std::max(1.0 - cos, eps));
  }
  return -total / static_cast<double>(rows);
}

}  // namespace sma::testing

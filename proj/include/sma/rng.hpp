#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace sma {

// SplitMix64 finalizer; used to derive independent stream seeds.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

using Rng = std::mt19937_64;

/// Fisher–Yates shuffle of [0, n).
std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng);

/// Symmetric Beta(alpha, alpha) via the ratio of two Gamma draws.
double sample_beta(double alpha, Rng& rng);

class Fnv1a {
 public:
  void update(std::span<const std::uint8_t> bytes);
  void update(const std::string& text);
  std::uint64_t value() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace sma

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "sma/attribution.hpp"
#include "sma/errors.hpp"

using namespace sma;
using sma::testing::random_values;

namespace {

const Shape kImage{3, 4, 5};

// f(x) = w·x + c for each sample of the batch.
BatchFunction linear(std::vector<double> w, double c) {
  return [w = std::move(w), c](const Tensor& batch) {
    const std::size_t n = batch.dim(0), per = batch.numel() / n;
    auto weights = Tensor::from({per, 1}, w);
    return add_scalar(matmul(reshape(batch, {n, per}), weights), c);
  };
}

// f(x) = sum of squares.
BatchFunction quadratic() {
  return [](const Tensor& batch) {
    const std::size_t n = batch.dim(0), per = batch.numel() / n;
    auto flat = reshape(batch, {n, per});
    return scalar_mul(mean_over_axis(mul(flat, flat), 1), static_cast<double>(per));
  };
}

// A smooth nonlinear function for linearity checks.
BatchFunction smooth(std::vector<double> w) {
  return [w = std::move(w)](const Tensor& batch) {
    const std::size_t n = batch.dim(0), per = batch.numel() / n;
    auto flat = reshape(batch, {n, per});
    auto weights = Tensor::from({per, 1}, w);
    auto s = matmul(flat, weights);
    return log(sigmoid(s));
  };
}

double sum_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s;
}

SampleRecord sample_with_class(std::size_t index) {
  DatasetSpec spec;
  spec.num_classes = 3;
  spec.num_backgrounds = 3;
  spec.image_size = 32;
  spec.max_objects_per_image = 1;
  return render_sample(spec, Split::Val, index);
}

std::size_t only_class(const SampleRecord& s) { return s.classes().front(); }

Model constant_model(std::uint64_t seed) {
  Model m(ModelConfig{3, 64, 8}, seed);
  for (auto& x : m.param("head_f.weight").tensor.mutable_values()) x = 0.0;
  for (auto& x : m.param("head_f.bias").tensor.mutable_values()) x = 0.7;
  return m;
}

RegionMask halves(std::size_t n) {
  RegionMask m;
  for (std::size_t i = 0; i < n; ++i) {
    m.object.push_back(i < n / 2);
    m.background.push_back(i >= n / 2);
  }
  return m;
}

}  // namespace

TEST(IntegratedGradients, LinearModelIsExactForAnyStepCount) {
  std::mt19937_64 rng(1);
  const auto w = random_values(numel(kImage), rng);
  const auto x = random_values(numel(kImage), rng, 0.0, 1.0);
  const std::vector<double> zero(x.size(), 0.0);
  for (std::size_t m : {1u, 8u, 128u}) {
    const auto ig = integrated_gradients(linear(w, 0.3), kImage, x, zero, m);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(ig[i], w[i] * x[i], 1e-10) << "m=" << m;
    const double gap = completeness_gap(ig, evaluate(linear(w, 0.3), kImage, x), evaluate(linear(w, 0.3), kImage, zero));
    EXPECT_LT(gap, 1e-10);
  }
}

TEST(IntegratedGradients, ConstantModelGivesZero) {
  std::mt19937_64 rng(2);
  const auto x = random_values(numel(kImage), rng);
  const std::vector<double> zero(x.size(), 0.0);
  const auto ig = integrated_gradients(linear(std::vector<double>(x.size(), 0.0), 4.0), kImage, x, zero, 16);
  for (double v : ig) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(completeness_gap(ig, 4.0, 4.0), 0.0);
}

// For f = |x|^2 the right-endpoint sum overshoots by exactly |x - x'|^2 / m.
TEST(IntegratedGradients, RightEndpointErrorMatchesClosedForm) {
  std::mt19937_64 rng(3);
  const auto x = random_values(numel(kImage), rng);
  const auto base = random_values(numel(kImage), rng);
  double dist2 = 0, fx = 0, fb = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dist2 += (x[i] - base[i]) * (x[i] - base[i]);
    fx += x[i] * x[i];
    fb += base[i] * base[i];
  }
  for (std::size_t m : {1u, 3u, 16u, 100u}) {
    const auto ig = integrated_gradients(quadratic(), kImage, x, base, m);
    EXPECT_NEAR(sum_of(ig) - (fx - fb), dist2 / static_cast<double>(m), 1e-10) << "m=" << m;
  }
}

TEST(IntegratedGradients, ChunkingDoesNotChangeResult) {
  std::mt19937_64 rng(4);
  const auto w = random_values(numel(kImage), rng);
  const auto x = random_values(numel(kImage), rng);
  const std::vector<double> zero(x.size(), 0.0);
  const auto ref = integrated_gradients(smooth(w), kImage, x, zero, 37, 1);
  for (std::size_t chunk : {2u, 16u, 37u, 64u}) {
    const auto ig = integrated_gradients(smooth(w), kImage, x, zero, 37, chunk);
    for (std::size_t i = 0; i < ig.size(); ++i) EXPECT_NEAR(ig[i], ref[i], 1e-12);
  }
}

TEST(IntegratedGradients, EvaluatesExactlyStepCountPoints) {
  std::mt19937_64 rng(5);
  const auto w = random_values(numel(kImage), rng);
  const auto x = random_values(numel(kImage), rng);
  const std::vector<double> zero(x.size(), 0.0);
  std::vector<double> alphas;
  BatchFunction probe = [&](const Tensor& batch) {
    const std::size_t per = numel(kImage);
    // Recover alpha from one coordinate with a nonzero input value.
    for (std::size_t n = 0; n < batch.dim(0); ++n) alphas.push_back(batch[n * per] / x[0]);
    return linear(w, 0.0)(batch);
  };
  integrated_gradients(probe, kImage, x, zero, 40, 16);
  ASSERT_EQ(alphas.size(), 40u);
  std::sort(alphas.begin(), alphas.end());
  for (std::size_t k = 0; k < 40; ++k) EXPECT_NEAR(alphas[k], static_cast<double>(k + 1) / 40.0, 1e-12);
}

TEST(IntegratedGradients, Linearity) {
  std::mt19937_64 rng(6);
  const auto w1 = random_values(numel(kImage), rng), w2 = random_values(numel(kImage), rng);
  const auto x = random_values(numel(kImage), rng);
  const std::vector<double> zero(x.size(), 0.0);
  const double a = 1.7, b = -0.6;
  BatchFunction combo = [&](const Tensor& batch) {
    return add(scalar_mul(smooth(w1)(batch), a), scalar_mul(smooth(w2)(batch), b));
  };
  const auto ig = integrated_gradients(combo, kImage, x, zero, 24);
  const auto g1 = integrated_gradients(smooth(w1), kImage, x, zero, 24);
  const auto g2 = integrated_gradients(smooth(w2), kImage, x, zero, 24);
  for (std::size_t i = 0; i < ig.size(); ++i) EXPECT_NEAR(ig[i], a * g1[i] + b * g2[i], 1e-9);
}

TEST(IntegratedGradients, RejectsBadArguments) {
  const std::vector<double> x(numel(kImage), 0.5), zero(numel(kImage), 0.0), short_x(3, 0.0);
  EXPECT_THROW(integrated_gradients(quadratic(), kImage, x, zero, 0), ContractViolation);
  EXPECT_THROW(integrated_gradients(quadratic(), kImage, short_x, zero, 4), ContractViolation);
}

TEST(ModelAttribution, CompletenessImprovesWithSteps) {
  Model model(ModelConfig{3, 64, 8}, 7);
  double previous = INFINITY;
  for (std::size_t m : {4u, 16u, 64u}) {
    double total = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto s = sample_with_class(i);
      AttributionConfig cfg;
      cfg.steps = m;
      cfg.target_class = only_class(s);
      total += attribute(model, s, i, cfg).completeness_gap;
    }
    EXPECT_LE(total, previous) << "m=" << m;
    previous = total;
  }
}

TEST(ModelAttribution, MapIsChannelSumAndDeterministic) {
  Model model(ModelConfig{3, 64, 8}, 8);
  const auto s = sample_with_class(1);
  AttributionConfig cfg;
  cfg.steps = 8;
  cfg.target_class = only_class(s);
  const auto a = attribute(model, s, 1, cfg), b = attribute(model, s, 1, cfg);
  EXPECT_EQ(a.ig.map, b.ig.map);
  EXPECT_EQ(a.sur, b.sur);
  EXPECT_EQ(a.bar, b.bar);
  ASSERT_EQ(a.ig.map.size(), 32u * 32u);
  for (std::size_t p = 0; p < a.ig.map.size(); ++p) {
    const double channels = a.ig.per_element[p] + a.ig.per_element[1024 + p] + a.ig.per_element[2048 + p];
    EXPECT_NEAR(a.ig.map[p], channels, 1e-12);
  }
  EXPECT_GE(a.sur, 0.0);
  EXPECT_GE(a.bar, 0.0);
  EXPECT_LE(a.bar, 1.0);
}

TEST(ModelAttribution, ConstantModelIsFlagged) {
  const Model model = constant_model(9);
  const auto s = sample_with_class(2);
  AttributionConfig cfg;
  cfg.steps = 8;
  cfg.target_class = only_class(s);
  const auto r = attribute(model, s, 2, cfg);
  for (double v : r.ig.map) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(r.sur_flagged);
  EXPECT_TRUE(r.bar_flagged);
  EXPECT_EQ(r.completeness_gap, 0.0);
}

TEST(Ratios, SpecifiedExamples) {
  const auto mask = halves(4);
  EXPECT_DOUBLE_EQ(sur(std::vector<double>{0.5, 0.5, 0.5, 0.5}, mask).value, 1.0);
  EXPECT_DOUBLE_EQ(sur(std::vector<double>{2.0, 1.0, 0.25, 0.75}, mask).value, 3.0);
  EXPECT_DOUBLE_EQ(bar(std::vector<double>{2.0, 1.0, 0.25, 0.75}, mask).value, 0.25);

  const auto all_object = sur(std::vector<double>{1.0, 1.0, 0.0, 0.0}, mask);
  EXPECT_EQ(all_object.value, kSurCap);
  EXPECT_TRUE(all_object.flagged);
  EXPECT_EQ(bar(std::vector<double>{1.0, 1.0, 0.0, 0.0}, mask).value, 0.0);
  EXPECT_EQ(bar(std::vector<double>{0.0, 0.0, 1.0, 2.0}, mask).value, 1.0);

  const auto nothing = bar(std::vector<double>{-1.0, 0.0, -2.0, 0.0}, mask);
  EXPECT_EQ(nothing.value, 0.0);
  EXPECT_TRUE(nothing.flagged);
}

TEST(Ratios, NegativeAttributionIsIgnored) {
  const auto mask = halves(4);
  EXPECT_DOUBLE_EQ(sur(std::vector<double>{3.0, -5.0, 1.0, -9.0}, mask).value, 3.0);
  EXPECT_DOUBLE_EQ(bar(std::vector<double>{3.0, -5.0, 1.0, -9.0}, mask).value, 0.25);
}

TEST(Ratios, PropertyBounds) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 500; ++t) {
    const auto map = random_values(16, rng, -2.0, 2.0);
    const auto mask = halves(16);
    const auto s = sur(map, mask);
    const auto b = bar(map, mask);
    ASSERT_GE(s.value, 0.0);
    ASSERT_LE(s.value, kSurCap);
    ASSERT_GE(b.value, 0.0);
    ASSERT_LE(b.value, 1.0);
  }
}

TEST(Ratios, EmptyRegionIsAContractViolation) {
  RegionMask no_background{{true, true}, {false, false}};
  EXPECT_THROW(sur(std::vector<double>{1.0, 1.0}, no_background), ContractViolation);
  EXPECT_THROW(bar(std::vector<double>{1.0, 1.0}, no_background), ContractViolation);
}

TEST(PairAnalysis, IdenticalModelsGiveIdenticalTables) {
  std::vector<SampleRecord> samples;
  for (std::size_t i = 0; i < 6; ++i) samples.push_back(sample_with_class(i));
  PairAnalysisConfig cfg;
  cfg.attribution.steps = 4;
  const Model a(ModelConfig{3, 64, 8}, 11), b(ModelConfig{3, 64, 8}, 11);
  const auto ta = pair_analysis(a, samples, 3, cfg), tb = pair_analysis(b, samples, 3, cfg);
  EXPECT_EQ(pair_table_csv(ta.rows), pair_table_csv(tb.rows));
  EXPECT_EQ(pair_table_csv(ta.rows).substr(0, 53), "class,split,n,mean_sur,mean_bar,mean_completeness_gap");
  std::size_t counted = 0;
  for (const auto& r : ta.rows) counted += r.n;
  EXPECT_EQ(counted, samples.size());
}

TEST(PairAnalysis, MissingSplitIsSkippedWithWarning) {
  DatasetSpec spec;
  spec.num_classes = 3;
  spec.num_backgrounds = 3;
  spec.image_size = 32;
  spec.max_objects_per_image = 1;
  spec.bias_ratio = 1.0;
  std::vector<SampleRecord> samples;
  for (std::size_t i = 0; i < 3; ++i) samples.push_back(render_sample(spec, Split::Val, i));
  PairAnalysisConfig cfg;
  cfg.attribution.steps = 2;
  const auto t = pair_analysis(constant_model(12), samples, 3, cfg);
  EXPECT_FALSE(t.warnings.empty());
  for (const auto& r : t.rows) {
    EXPECT_EQ(r.split, "aligned");
    EXPECT_EQ(r.flagged, r.n);
  }
}

TEST(Heatmap, ZeroIsMidGrayAndExtremesSaturate) {
  IgMap ig;
  ig.height = 1;
  ig.width = 3;
  ig.map = {-2.0, 0.0, 2.0};
  const auto img = heatmap_pgm(ig);
  EXPECT_EQ(img.width, 3u);
  EXPECT_EQ(img.height, 1u);
  EXPECT_EQ(img.pixels[1], 128);
  EXPECT_LE(img.pixels[0], 1);
  EXPECT_EQ(img.pixels[2], 255);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "sma/dataset.hpp"
#include "sma/errors.hpp"
#include "sma/localization.hpp"

using namespace sma;
using sma::testing::random_values;

namespace {

LocalizationMap flat_map(std::size_t k, std::size_t h, std::size_t w, std::vector<double> upsampled) {
  LocalizationMap m;
  m.num_classes = k;
  m.height = h;
  m.width = w;
  m.upsampled = std::move(upsampled);
  return m;
}

std::vector<std::uint8_t> random_labels(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(k));
  std::vector<std::uint8_t> v(n);
  for (auto& x : v) x = static_cast<std::uint8_t>(d(rng));
  return v;
}

// Per-label IoU by direct pixel counting.
std::vector<double> brute_force_iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                                    std::size_t labels, std::vector<bool>& present) {
  std::vector<double> iou(labels, 0.0);
  present.assign(labels, false);
  for (std::size_t c = 0; c < labels; ++c) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t p = 0; p < pred.size(); ++p) {
      const bool a = pred[p] == c, b = gt[p] == c;
      inter += a && b;
      uni += a || b;
    }
    present[c] = uni > 0;
    if (uni > 0) iou[c] = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return iou;
}

SampleRecord small_sample(std::size_t index) {
  DatasetSpec spec;
  spec.num_classes = 3;
  spec.num_backgrounds = 3;
  spec.image_size = 32;
  return render_sample(spec, Split::Val, index);
}

}  // namespace

TEST(Bilinear, ReproducesLinearRamp) {
  const std::size_t h = 4, w = 5, oh = 16, ow = 20;
  std::vector<double> plane(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) plane[y * w + x] = 0.3 * static_cast<double>(y) - 0.7 * static_cast<double>(x) + 2.0;
  const auto up = bilinear_upsample(plane, h, w, oh, ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      const double fy = std::clamp((static_cast<double>(y) + 0.5) * 4.0 / 16.0 - 0.5, 0.0, 3.0);
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * 5.0 / 20.0 - 0.5, 0.0, 4.0);
      EXPECT_NEAR(up[y * ow + x], 0.3 * fy - 0.7 * fx + 2.0, 1e-12);
    }
}

TEST(Bilinear, ConstantAndBounds) {
  const auto up = bilinear_upsample(std::vector<double>(6, 0.4), 2, 3, 8, 12);
  for (double v : up) EXPECT_DOUBLE_EQ(v, 0.4);
  std::mt19937_64 rng(1);
  const auto plane = random_values(64, rng, 0.0, 1.0);
  const auto big = bilinear_upsample(plane, 8, 8, 64, 64);
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  for (double v : big) {
    ASSERT_GE(v, *lo - 1e-15);
    ASSERT_LE(v, *hi + 1e-15);
  }
  EXPECT_THROW(bilinear_upsample(plane, 4, 4, 8, 8), ContractViolation);
}

TEST(Cam, ZeroWeightRowGivesZeroMap) {
  Model m(ModelConfig{3, 64, 8}, 1);
  auto w = m.param("head_f.weight").tensor.mutable_values();
  for (std::size_t c = 0; c < 64; ++c) w[1 * 64 + c] = 0.0;
  const auto s = small_sample(0);
  const auto loc = cam(m, s.image, 32, 32);
  const std::size_t hw = loc.map_h * loc.map_w;
  for (std::size_t p = 0; p < hw; ++p) EXPECT_EQ(loc.scores[1 * hw + p], 0.0);
  for (double v : loc.scores) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const auto first = loc.scores.begin() + static_cast<std::ptrdiff_t>(k * hw);
    const double mx = *std::max_element(first, first + static_cast<std::ptrdiff_t>(hw));
    EXPECT_TRUE(mx == 0.0 || mx == 1.0);
  }
}

TEST(Cam, SpatiallyConstantDeepMapGivesConstantCam) {
  Model m(ModelConfig{3, 64, 8}, 2);
  for (int s = 1; s <= 4; ++s)
    for (auto& x : m.param("stage" + std::to_string(s) + ".conv.weight").tensor.mutable_values()) x = 0.0;
  auto bias = m.param("stage4.conv.bias").tensor.mutable_values();
  for (std::size_t c = 0; c < 64; ++c) bias[c] = 0.05 * static_cast<double>(c % 7);
  const auto s = small_sample(1);
  const auto loc = cam(m, s.image, 32, 32);
  const std::size_t hw = loc.map_h * loc.map_w;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t p = 1; p < hw; ++p) EXPECT_EQ(loc.scores[k * hw + p], loc.scores[k * hw]);
  const std::size_t HW = 32 * 32;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t p = 1; p < HW; ++p) EXPECT_DOUBLE_EQ(loc.upsampled[k * HW + p], loc.upsampled[k * HW]);
}

// Recomputes CAM from a batched forward pass: relu(W_f · deep), max-normalized.
TEST(Cam, MatchesBatchedOracleAndClassGate) {
  Model m(ModelConfig{3, 64, 8}, 3);
  const auto a = small_sample(2), b = small_sample(3);
  std::vector<double> both(a.image);
  both.insert(both.end(), b.image.begin(), b.image.end());
  const auto deep = m.backbone_forward(Tensor::from({2, 3, 32, 32}, both)).deep;
  const std::size_t hw = deep.dim(2) * deep.dim(3);
  const auto w = m.param("head_f.weight").tensor.values();
  const auto loc = cam(m, b.image, 32, 32);
  ASSERT_EQ(loc.map_h * loc.map_w, hw);
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<double> raw(hw, 0.0);
    for (std::size_t p = 0; p < hw; ++p) {
      double s = 0;
      for (std::size_t c = 0; c < 64; ++c) s += w[k * 64 + c] * deep[(64 + c) * hw + p];
      raw[p] = std::max(0.0, s);
    }
    const double mx = *std::max_element(raw.begin(), raw.end());
    for (std::size_t p = 0; p < hw; ++p)
      EXPECT_NEAR(loc.scores[k * hw + p], mx > 0 ? raw[p] / mx : 0.0, 1e-12);
  }
  const auto gated = cam(m, b.image, 32, 32, std::vector<std::size_t>{2});
  for (std::size_t p = 0; p < hw; ++p) {
    EXPECT_EQ(gated.scores[p], 0.0);
    EXPECT_EQ(gated.scores[hw + p], 0.0);
    EXPECT_EQ(gated.scores[2 * hw + p], loc.scores[2 * hw + p]);
  }
}

TEST(Threshold, SpecifiedExamples) {
  const std::size_t plane = 6;
  auto low = flat_map(2, 2, 3, std::vector<double>(2 * plane, 0.2));
  for (auto v : threshold_mask(low, 0.25)) EXPECT_EQ(v, 0);
  std::vector<double> one(2 * plane, 0.0);
  for (std::size_t p = 0; p < plane; ++p) one[plane + p] = 0.9;
  for (auto v : threshold_mask(flat_map(2, 2, 3, one), 0.25)) EXPECT_EQ(v, 2);
  // Argmax among classes above the threshold.
  auto mixed = flat_map(2, 1, 2, {0.5, 0.9, 0.8, 0.3});
  EXPECT_EQ(threshold_mask(mixed, 0.25), (std::vector<std::uint8_t>{2, 1}));
  EXPECT_EQ(threshold_mask(mixed, 0.6), (std::vector<std::uint8_t>{2, 1}));
  EXPECT_EQ(threshold_mask(mixed, 0.85), (std::vector<std::uint8_t>{0, 1}));
  EXPECT_THROW(threshold_mask(mixed, 0.0), ContractViolation);
  EXPECT_THROW(threshold_mask(mixed, 1.0), ContractViolation);
}

TEST(Threshold, ForegroundMonotoneInTau) {
  std::mt19937_64 rng(4);
  const auto loc = flat_map(4, 16, 16, random_values(4 * 256, rng, 0.0, 1.0));
  std::size_t previous = 257;
  for (double tau = 0.05; tau < 1.0; tau += 0.05) {
    const auto mask = threshold_mask(loc, tau);
    const auto fg = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
    EXPECT_LE(fg, previous) << "tau " << tau;
    previous = fg;
  }
}

TEST(Miou, SpecifiedExamples) {
  const std::vector<std::uint8_t> gt{0, 0, 1, 1, 2, 2, 0, 0};
  const auto same = miou(gt, gt, 2);
  EXPECT_EQ(same.miou, 1.0);

  const std::vector<std::uint8_t> empty(8, 0);
  const auto none = miou(empty, std::vector<std::uint8_t>{0, 0, 0, 1, 1, 0, 0, 0}, 2);
  EXPECT_EQ(*none.iou[1], 0.0);
  EXPECT_FALSE(none.iou[2].has_value());

  const auto half = miou(std::vector<std::uint8_t>{0, 0, 1, 0}, std::vector<std::uint8_t>{0, 0, 1, 1}, 1);
  EXPECT_DOUBLE_EQ(*half.iou[1], 0.5);
  EXPECT_DOUBLE_EQ(*half.iou[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(half.miou, (0.5 + 2.0 / 3.0) / 2.0);

  EXPECT_THROW(miou(std::vector<std::uint8_t>{3}, std::vector<std::uint8_t>{0}, 2), ContractViolation);
  EXPECT_THROW(miou(std::vector<std::uint8_t>{0, 0}, std::vector<std::uint8_t>{0}, 2), ContractViolation);
}

TEST(Miou, MatchesBruteForceCounting) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 1 + t % 5;
    const auto pred = random_labels(97, k, rng), gt = random_labels(97, k, rng);
    std::vector<bool> present;
    const auto ref = brute_force_iou(pred, gt, k + 1, present);
    const auto r = miou(pred, gt, k);
    double total = 0;
    std::size_t count = 0;
    for (std::size_t c = 0; c <= k; ++c) {
      ASSERT_EQ(r.iou[c].has_value(), present[c]);
      if (!present[c]) continue;
      EXPECT_EQ(*r.iou[c], ref[c]);
      total += ref[c];
      ++count;
    }
    EXPECT_NEAR(r.miou, total / static_cast<double>(count), 1e-15);
  }
}

TEST(Miou, RelabelingInvarianceAndAccumulation) {
  std::mt19937_64 rng(6);
  const std::size_t k = 4;
  const auto pred = random_labels(200, k, rng), gt = random_labels(200, k, rng);
  const std::vector<std::uint8_t> relabel{3, 0, 4, 1, 2};
  std::vector<std::uint8_t> p2(pred.size()), g2(gt.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    p2[i] = relabel[pred[i]];
    g2[i] = relabel[gt[i]];
  }
  EXPECT_NEAR(miou(pred, gt, k).miou, miou(p2, g2, k).miou, 1e-15);

  // Summing confusion over two halves equals evaluating the whole.
  ConfusionMatrix acc(k);
  acc.add(std::span(pred).first(100), std::span(gt).first(100));
  acc.add(std::span(pred).subspan(100), std::span(gt).subspan(100));
  EXPECT_EQ(evaluate_confusion(acc).miou, miou(pred, gt, k).miou);
  std::uint64_t total = 0;
  for (auto c : acc.counts) total += c;
  EXPECT_EQ(total, 200u);
}

TEST(Miou, SummaryCsvLayout) {
  const auto r = miou(std::vector<std::uint8_t>{0, 1, 1, 0}, std::vector<std::uint8_t>{0, 1, 0, 0}, 2);
  const auto csv = seg_summary_csv(r);
  EXPECT_EQ(csv.substr(0, 10), "class,iou\n");
  EXPECT_NE(csv.find("\n2,\n"), std::string::npos);
  EXPECT_NE(csv.find("miou,"), std::string::npos);
}

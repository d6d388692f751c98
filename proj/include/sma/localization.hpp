#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sma/model.hpp"

namespace sma {

struct LocalizationMap {
  std::size_t num_classes = 0;
  std::size_t map_h = 0, map_w = 0;    // deep-map resolution
  std::size_t height = 0, width = 0;   // image resolution
  std::vector<double> scores;          // K×h×w, each class max-normalized to [0,1]
  std::vector<double> upsampled;       // K×H×W, bilinear
};

/// CAM_c = relu(W_f[c] · deep) per location, max-normalized per class. When
/// `classes` is given, every other class map is zero (image-level labels gate
/// which classes may appear, as in weakly supervised pseudo-labelling).
LocalizationMap cam(const Model& model, std::span<const double> image, std::size_t height, std::size_t width,
                    std::optional<std::vector<std::size_t>> classes = std::nullopt);

// Bilinear with half-pixel centers, edge-clamped.
std::vector<double> bilinear_upsample(std::span<const double> plane, std::size_t h, std::size_t w,
                                      std::size_t out_h, std::size_t out_w);

/// Per pixel, 1 + argmax over classes whose score exceeds tau; 0 otherwise.
std::vector<std::uint8_t> threshold_mask(const LocalizationMap& loc, double tau = 0.25);

// (K+1)×(K+1) counts, row = ground truth, column = prediction.
struct ConfusionMatrix {
  std::size_t num_labels = 0;  // K + 1
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t num_classes);
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * num_labels + pred]; }
};

struct SegEvalResult {
  std::vector<std::optional<double>> iou;  // per label 0..K; empty when absent from both maps
  double miou = 0.0;
  ConfusionMatrix confusion;
};

SegEvalResult evaluate_confusion(const ConfusionMatrix& confusion);
/// IoU_c = TP/(TP+FP+FN); mIoU averages labels with a non-empty union.
SegEvalResult miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::size_t num_classes);

std::string seg_summary_csv(const SegEvalResult& result);

}  // namespace sma

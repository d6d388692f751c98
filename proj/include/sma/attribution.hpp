#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sma/dataset.hpp"
#include "sma/image_io.hpp"
#include "sma/model.hpp"
#include "sma/tensor.hpp"

namespace sma {

struct AttributionConfig {
  std::size_t steps = 128;        // m
  std::size_t target_class = 0;
  std::size_t chunk = 16;         // interpolation points per backward pass
  double baseline_value = 0.0;    // constant baseline; 0 is the black image
};

// Maps a batch N×C×H×W to one scalar output per sample (shape N or N×1).
using BatchFunction = std::function<Tensor(const Tensor& batch)>;

/// Right-endpoint Riemann approximation of Integrated Gradients with exactly
/// `steps` gradient evaluations at alpha = k/steps, k = 1..steps. `input` is
/// C×H×W (flattened); returns per-element attributions of the same layout.
std::vector<double> integrated_gradients(const BatchFunction& f, const Shape& image_shape,
                                         std::span<const double> input, std::span<const double> baseline,
                                         std::size_t steps, std::size_t chunk = 16);

struct IgMap {
  std::size_t height = 0, width = 0;
  std::vector<double> per_element;  // C×H×W
  std::vector<double> map;          // H×W, summed over channels
};

/// IG of the pre-sigmoid f(z^o) logit for cfg.target_class.
IgMap integrated_gradients(const Model& model, const SampleRecord& sample, const AttributionConfig& cfg);

// f evaluated at one C×H×W point.
double evaluate(const BatchFunction& f, const Shape& image_shape, std::span<const double> input);
double target_logit(const Model& model, const SampleRecord& sample, std::size_t target_class);
double baseline_logit(const Model& model, const SampleRecord& sample, std::size_t target_class,
                      double baseline_value = 0.0);

/// |sum(attributions) - (f(x) - f(baseline))|.
double completeness_gap(std::span<const double> attributions, double f_input, double f_baseline);

struct RegionMask {
  std::vector<bool> object;      // R_o: pixels of the target class
  std::vector<bool> background;  // R_b: pixels of no class
};
RegionMask region_mask(const SampleRecord& sample, std::size_t target_class);

inline constexpr double kSurFloor = 1e-7;
inline constexpr double kSurCap = 1e6;

struct RatioValue {
  double value = 0.0;
  bool flagged = false;  // SUR: denominator clamped; BAR: no positive mass
};

/// Positive-part object mass over positive-part background mass, denominator
/// floored at 1e-7 and the result capped at 1e6.
RatioValue sur(std::span<const double> ig_map, const RegionMask& mask);
/// Positive-part background mass over positive-part object + background mass.
RatioValue bar(std::span<const double> ig_map, const RegionMask& mask);

struct AttributionResult {
  std::size_t sample = 0;
  std::size_t target_class = 0;
  IgMap ig;
  double sur = 0, bar = 0;
  bool sur_flagged = false, bar_flagged = false;
  double completeness_gap = 0;
  double relative_gap = 0;  // gap / |f(x) - f(base)|
};

AttributionResult attribute(const Model& model, const SampleRecord& sample, std::size_t sample_index,
                            const AttributionConfig& cfg);

struct PairAnalysisConfig {
  AttributionConfig attribution;
  std::size_t max_per_class = 0;  // 0 = every matching sample
  std::size_t threads = 1;
};

struct PairRow {
  std::size_t cls = 0;
  std::string split;  // "aligned" or "conflicting"
  std::size_t n = 0;
  double mean_sur = 0, mean_bar = 0, mean_completeness_gap = 0;
  std::size_t flagged = 0;
};

struct PairAnalysis {
  std::vector<PairRow> rows;
  std::vector<AttributionResult> results;
  std::vector<std::string> warnings;
};

/// For every class and each bias split, averages SUR, BAR and the completeness
/// gap over samples containing that class, attributing to that class.
PairAnalysis pair_analysis(const Model& model, const std::vector<SampleRecord>& samples,
                           std::size_t num_classes, const PairAnalysisConfig& cfg);

std::string pair_table_csv(const std::vector<PairRow>& rows);

/// Max-abs normalized, affinely mapped so 128 is zero attribution.
Image8 heatmap_pgm(const IgMap& ig);

// Deep copy with every parameter frozen; safe to use from another thread.
Model frozen_copy(const Model& model);

}  // namespace sma

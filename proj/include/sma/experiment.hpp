#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sma/attribution.hpp"
#include "sma/config.hpp"
#include "sma/dataset.hpp"
#include "sma/localization.hpp"
#include "sma/model.hpp"
#include "sma/sma.hpp"

namespace sma {

// Everything one run needs, parsed from a `key = value` file.
struct ExperimentConfig {
  std::string arm = "sma";
  std::filesystem::path data_dir = "data";
  DatasetSpec data;
  ModelConfig model;
  TrainConfig train;
  std::size_t ig_steps = 128;
  std::size_t ig_chunk = 16;
  std::size_t analysis_max_per_class = 0;  // 0 = all samples
  double tau = 0.25;

  void validate() const;
};

/// Throws ConfigError on unknown keys, malformed values or violated bounds.
ExperimentConfig experiment_config(const KeyValueConfig& kv);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Every accepted key with its default and a one-line description.
std::string config_template();
// Canonical `key = value` rendering; parsing it back gives the same config.
std::string config_echo(const ExperimentConfig& cfg);
/// `<arm>-<hash of everything but the seed>-seed<N>`.
std::string run_name(const ExperimentConfig& cfg);

struct LocalizationReport {
  SegEvalResult all{SegEvalResult{{}, 0.0, ConfusionMatrix(0)}};
  SegEvalResult aligned{SegEvalResult{{}, 0.0, ConfusionMatrix(0)}};
  SegEvalResult conflicting{SegEvalResult{{}, 0.0, ConfusionMatrix(0)}};
  std::vector<double> per_image_miou;
  std::vector<std::vector<std::uint8_t>> masks;  // filled only when requested
};

/// CAM pseudo-masks (restricted to each image's label classes) scored against
/// the ground-truth object masks, overall and per bias split.
LocalizationReport evaluate_localization(const Model& model, const std::vector<SampleRecord>& samples,
                                         std::size_t num_classes, double tau, bool keep_masks = false);

std::string per_image_iou_csv(const std::vector<SampleRecord>& samples, const LocalizationReport& report,
                              const std::vector<std::string>& names);

// Mean SUR/BAR over the rows of one bias split, weighting classes equally.
struct SplitAttribution {
  double mean_sur = 0, mean_bar = 0;
};
SplitAttribution split_means(const std::vector<PairRow>& rows, const std::string& split);

}  // namespace sma

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sma/image_io.hpp"

namespace sma {

struct DatasetSpec {
  std::size_t num_classes = 5;
  std::size_t num_backgrounds = 5;
  double bias_ratio = 0.9;
  std::size_t image_size = 64;
  std::size_t train_samples = 2000;
  std::size_t val_samples = 500;
  std::size_t max_objects_per_image = 2;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the violated bound.
  void validate() const;
};

enum class Split { Train, Val };
const char* split_name(Split split);

struct SampleRecord {
  std::size_t channels = 3, height = 0, width = 0;
  std::vector<double> image;             // C×H×W in [0,1]
  std::vector<double> label;             // multi-hot, length K
  std::vector<std::uint8_t> object_mask;  // H×W class ids 1..K, 0 background
  std::size_t background_id = 0;         // background under the first object
  std::vector<std::size_t> object_backgrounds;  // one per present class, ascending class order
  bool bias_aligned = false;

  std::vector<std::size_t> classes() const;  // 0-based ids of present classes
};

struct ManifestRow {
  std::string image;  // relative to Manifest::root
  std::string mask;
  std::vector<std::size_t> label;  // 0-based class ids, ascending
  std::vector<std::size_t> backgrounds;  // parallel to label
  bool bias_aligned = false;

  std::size_t background_id() const { return backgrounds.front(); }
};

struct Manifest {
  std::string split;
  DatasetSpec spec;
  std::filesystem::path root;
  std::vector<ManifestRow> rows;
};

/// Pure function of (spec, split, index): the object placement, textures and
/// noise all come from an RNG seeded by those three values.
SampleRecord render_sample(const DatasetSpec& spec, Split split, std::size_t index);

/// Writes images, masks, `train.csv`, `val.csv` and `dataset.cfg` under out_dir.
std::vector<Manifest> generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

void write_manifest(const Manifest& manifest);
/// Reads `<root>/<split>.csv` and the spec echo in `<root>/dataset.cfg`.
Manifest read_manifest(const std::filesystem::path& root, const std::string& split);

SampleRecord load_sample(const Manifest& manifest, const ManifestRow& row);

struct BiasSplit {
  std::vector<ManifestRow> aligned;
  std::vector<ManifestRow> conflicting;
};
BiasSplit split_bias(const std::vector<ManifestRow>& rows);

struct CoOccurrence {
  std::size_t num_classes = 0, num_backgrounds = 0;
  std::vector<double> ratios;  // K×B row-major
  std::vector<bool> empty_class;
  double at(std::size_t k, std::size_t b) const { return ratios[k * num_backgrounds + b]; }
};
CoOccurrence co_occurrence(const std::vector<ManifestRow>& rows, std::size_t num_classes,
                           std::size_t num_backgrounds);

// Key=value echo of a spec, and its inverse; shared with the CLI config reader.
std::string dataset_spec_echo(const DatasetSpec& spec);

// Hex FNV-1a over the manifest CSV bytes and every referenced file.
std::string dataset_hash(const Manifest& manifest);

}  // namespace sma

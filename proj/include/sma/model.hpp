#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sma/optim.hpp"
#include "sma/tensor.hpp"

namespace sma {

struct ModelConfig {
  std::size_t num_classes = 5;
  std::size_t feature_channels = 64;   // C, width of the deep map and of z^o, z^b
  std::size_t attention_channels = 8;  // d
};

inline constexpr std::size_t kStageChannels[3] = {16, 32, 64};
inline constexpr std::size_t kShallowChannels = 32;
inline constexpr double kInputCenter = 0.5;

struct BackboneOutput {
  Tensor shallow;  // N×32×h×w, average-pooled from the stage-2 map
  Tensor deep;     // N×C×h×w
};

// Batched DisentangledFeatures: row i of every tensor belongs to sample i.
struct Disentangled {
  Tensor z_o;     // N×C
  Tensor z_b;     // N×C
  Tensor attn_o;  // N×d×(h·w), rows sum to 1
  Tensor attn_b;
};

/// Four-stage conv backbone, attention aggregators M_o (phi, over the deep
/// map) and M_b (theta, over the shallow tap), head f (C→K) and head f_s (2C→K).
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& param(const std::string& name);
  const Parameter& param(const std::string& name) const;

  // Toggles requires_grad on every parameter (off while attributing).
  void set_trainable(bool on);

  BackboneOutput backbone_forward(const Tensor& images) const;
  Disentangled aggregate(const Tensor& deep, const Tensor& shallow) const;
  Tensor classify(const Tensor& rep) const;           // N×C → N×K
  Tensor classify_shuffled(const Tensor& rep) const;  // N×2C → N×K

  // f(z^o) logits straight from images; the branch attribution and CAM read.
  Tensor object_logits(const Tensor& images) const;

 private:
  Tensor conv_stage(const Tensor& x, int stage, std::size_t stride) const;
  const Tensor& value(const std::string& name) const { return param(name).tensor; }

  ModelConfig config_;
  std::vector<Parameter> params_;
};

/// Little-endian "SMAC" v1 container of named f64 tensors. Written atomically.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const Model& model);
/// Architecture is recovered from the stored shapes.
Model load_checkpoint(const std::filesystem::path& path);
Model decode_checkpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace sma

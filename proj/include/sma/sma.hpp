#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sma/dataset.hpp"
#include "sma/model.hpp"
#include "sma/rng.hpp"
#include "sma/tensor.hpp"

namespace sma {

enum class ShuffleMode { Off, BackgroundOnly, TwoWay, Interpolate };

ShuffleMode parse_shuffle_mode(const std::string& text);
const char* to_string(ShuffleMode mode);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t t_aug = 6;
  // false trains the plain classifier BCE(f(z^o), y) with no background term.
  bool disentangle = true;
  double lambda = 0.5;
  double lr = 0.1;
  double momentum = 0.9;
  double poly_power = 0.9;
  std::size_t batch_size = 16;
  double grad_clip = 0.5;  // global L2 norm bound; 0 disables
  double eps_log = 1e-7;
  ShuffleMode shuffle_mode = ShuffleMode::TwoWay;
  double alpha = 0.6;
  std::uint64_t seed = 0;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Losses. BCE is sigmoid + binary cross-entropy, mean over batch and classes,
// with each log argument clamped below at eps.

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, double eps = 1e-7);

/// BCE(f(z^o), y) + BCE(f(z^b), 0).
Tensor classification_loss(const Tensor& logits_o, const Tensor& logits_b, const Tensor& y, double eps = 1e-7);

/// -mean_i log(max(1 - cos(z^o_i, z^b_i), eps)).
Tensor contrastive_loss(const Tensor& z_o, const Tensor& z_b, double eps = 1e-7);

struct ShuffledBatch {
  Tensor z_sb;  // row i = [z^o_i, z^b_{perm_b(i)}]
  Tensor z_so;  // row i = [z^o_{perm_o(i)}, z^b_i]
  std::vector<std::size_t> perm_b;
  std::vector<std::size_t> perm_o;
  Tensor y_hat;  // row i = y_{perm_o(i)}
};

/// Draws perm_b then perm_o by Fisher–Yates from `rng`. Background halves of
/// both concatenations are detached.
ShuffledBatch shuffle_augment(const Tensor& z_o, const Tensor& z_b, const Tensor& y, Rng& rng);
ShuffledBatch shuffle_with(const Tensor& z_o, const Tensor& z_b, const Tensor& y,
                           std::vector<std::size_t> perm_b, std::vector<std::size_t> perm_o);

struct ShuffleLoss {
  Tensor background_term;  // BCE(f_s(z^sb), y)
  Tensor object_term;      // BCE(f_s(z^so), ŷ); undefined in background-only mode
  Tensor total;
};

ShuffleLoss shuffle_loss(const Model& model, const ShuffledBatch& shuffled, const Tensor& y, ShuffleMode mode,
                         double eps = 1e-7);

struct Interpolated {
  Tensor z_mix;  // N×2C
  Tensor y_mix;  // N×K
  std::vector<std::size_t> partner;
  std::vector<double> delta;
};

/// z̃_i = δ_i [z^o_i, z^b_i] + (1-δ_i) [z^o_j, z^b_j] with j = perm(i), δ_i ~ Beta(α, α).
Interpolated interpolate_combine(const Tensor& z_o, const Tensor& z_b, const Tensor& y, Rng& rng, double alpha);
Interpolated interpolate_with(const Tensor& z_o, const Tensor& z_b, const Tensor& y,
                              std::vector<std::size_t> partner, std::vector<double> delta);

/// L_cls + λ L_contr (+ L_shuffle when epoch >= t_aug). λ = 0 drops the term.
Tensor total_loss(const Tensor& cls, const Tensor& contr, const Tensor& shuffle, double lambda, std::size_t epoch,
                  std::size_t t_aug);

struct LossParts {
  Tensor cls, contr, shuffle, total;
  Tensor logits_o;
};

/// One forward pass of the full objective for a batch at a given epoch.
LossParts compute_losses(const Model& model, const Tensor& images, const Tensor& y, const TrainConfig& config,
                         std::size_t epoch, Rng& shuffle_rng);

// ---------------------------------------------------------------------------
// Training

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double loss_cls = 0, loss_contr = 0, loss_shuffle = 0;
  double train_acc = 0;  // exact-match multi-label accuracy at threshold 0.5
};

struct InMemorySplit {
  std::size_t channels = 3, height = 0, width = 0, num_classes = 0;
  std::vector<SampleRecord> samples;
};
InMemorySplit load_split(const Manifest& manifest);

// Stacks samples[indices] into N×3×H×W images and N×K labels.
std::pair<Tensor, Tensor> make_batch(const InMemorySplit& data, std::span<const std::size_t> indices);

using EpochCallback = std::function<void(const EpochMetrics&)>;

std::vector<EpochMetrics> train(const TrainConfig& config, const InMemorySplit& data, Model& model,
                                const EpochCallback& on_epoch = {});

std::string metrics_csv(const std::vector<EpochMetrics>& log);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& log);

}  // namespace sma

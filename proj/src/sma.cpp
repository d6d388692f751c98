#include "sma/sma.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sma/errors.hpp"
#include "sma/image_io.hpp"
#include "sma/optim.hpp"

namespace sma {

ShuffleMode parse_shuffle_mode(const std::string& text) {
  if (text == "off") return ShuffleMode::Off;
  if (text == "background_only") return ShuffleMode::BackgroundOnly;
  if (text == "two_way") return ShuffleMode::TwoWay;
  if (text == "interpolate") return ShuffleMode::Interpolate;
  throw ConfigError("shuffle_mode must be one of off, background_only, two_way, interpolate; got '" + text + "'");
}

const char* to_string(ShuffleMode mode) {
  switch (mode) {
    case ShuffleMode::Off: return "off";
    case ShuffleMode::BackgroundOnly: return "background_only";
    case ShuffleMode::TwoWay: return "two_way";
    case ShuffleMode::Interpolate: return "interpolate";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (t_aug > epochs) throw ConfigError("t_aug must lie in [0, epochs]");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(eps_log > 0.0 && eps_log < 0.5)) throw ConfigError("eps_log must lie in (0, 0.5)");
  if (!disentangle && (lambda != 0.0 || shuffle_mode != ShuffleMode::Off))
    throw ConfigError("disentangle = false (plain classifier) requires lambda = 0 and shuffle_mode = off");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (shuffle_mode != ShuffleMode::Off && batch_size < 2)
    throw ConfigError("batch_size must be >= 2 when shuffling is enabled");
  if (shuffle_mode == ShuffleMode::Interpolate && !(alpha > 0.0))
    throw ConfigError("alpha must be > 0 in interpolate mode");
}

// ---------------------------------------------------------------------------
// Losses

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, double eps) {
  if (logits.shape() != targets.shape())
    throw ContractViolation("bce: logits " + to_string(logits.shape()) + " vs targets " +
                            to_string(targets.shape()));
  std::vector<double> complement(targets.numel());
  for (std::size_t i = 0; i < complement.size(); ++i) complement[i] = 1.0 - targets[i];
  Tensor not_y = Tensor::from(targets.shape(), std::move(complement));

  Tensor p = sigmoid(logits);
  Tensor log_p = log(clamp_min(p, eps));
  Tensor log_q = log(clamp_min(add_scalar(scalar_mul(p, -1.0), 1.0), eps));
  Tensor ll = add(mul(targets, log_p), mul(not_y, log_q));
  return scalar_mul(mean(ll), -1.0);
}

Tensor classification_loss(const Tensor& logits_o, const Tensor& logits_b, const Tensor& y, double eps) {
  if (logits_o.shape() != logits_b.shape())
    throw ContractViolation("classification_loss: " + to_string(logits_o.shape()) + " vs " +
                            to_string(logits_b.shape()));
  Tensor zeros = Tensor::zeros(y.shape());
  return add(bce_with_logits(logits_o, y, eps), bce_with_logits(logits_b, zeros, eps));
}

Tensor contrastive_loss(const Tensor& z_o, const Tensor& z_b, double eps) {
  Tensor sim = cosine_similarity(z_o, z_b, eps);
  Tensor gap = clamp_min(add_scalar(scalar_mul(sim, -1.0), 1.0), eps);
  return scalar_mul(mean(log(gap)), -1.0);
}

// ---------------------------------------------------------------------------
// Shuffling

namespace {

void check_permutation(const std::vector<std::size_t>& perm, std::size_t n, const char* what) {
  if (perm.size() != n) throw ContractViolation(std::string(what) + ": permutation length mismatch");
  std::vector<bool> seen(n, false);
  for (auto p : perm) {
    if (p >= n || seen[p]) throw ContractViolation(std::string(what) + ": not a bijection on [0, N)");
    seen[p] = true;
  }
}

void check_pair(const Tensor& z_o, const Tensor& z_b, const Tensor& y) {
  if (z_o.shape() != z_b.shape() || z_o.rank() != 2)
    throw ContractViolation("representations must both be N×C, got " + to_string(z_o.shape()) + " and " +
                            to_string(z_b.shape()));
  if (y.rank() != 2 || y.dim(0) != z_o.dim(0))
    throw ContractViolation("labels " + to_string(y.shape()) + " do not match batch " + to_string(z_o.shape()));
}

}  // namespace

ShuffledBatch shuffle_with(const Tensor& z_o, const Tensor& z_b, const Tensor& y, std::vector<std::size_t> perm_b,
                           std::vector<std::size_t> perm_o) {
  check_pair(z_o, z_b, y);
  const std::size_t n = z_o.dim(0);
  check_permutation(perm_b, n, "shuffle perm_b");
  check_permutation(perm_o, n, "shuffle perm_o");
  Tensor background = detach(z_b);
  ShuffledBatch out;
  out.z_sb = concat_over_axis({z_o, gather_rows(background, perm_b)}, 1);
  out.z_so = concat_over_axis({gather_rows(z_o, perm_o), background}, 1);
  out.y_hat = gather_rows(y, perm_o);
  out.perm_b = std::move(perm_b);
  out.perm_o = std::move(perm_o);
  return out;
}

ShuffledBatch shuffle_augment(const Tensor& z_o, const Tensor& z_b, const Tensor& y, Rng& rng) {
  check_pair(z_o, z_b, y);
  const std::size_t n = z_o.dim(0);
  if (n < 2) throw ConfigError("shuffling needs a batch of at least 2 samples");
  auto perm_b = random_permutation(n, rng);
  auto perm_o = random_permutation(n, rng);
  return shuffle_with(z_o, z_b, y, std::move(perm_b), std::move(perm_o));
}

ShuffleLoss shuffle_loss(const Model& model, const ShuffledBatch& shuffled, const Tensor& y, ShuffleMode mode,
                         double eps) {
  ShuffleLoss out;
  out.background_term = bce_with_logits(model.classify_shuffled(shuffled.z_sb), y, eps);
  if (mode == ShuffleMode::BackgroundOnly) {
    out.total = out.background_term;
    return out;
  }
  out.object_term = bce_with_logits(model.classify_shuffled(shuffled.z_so), shuffled.y_hat, eps);
  out.total = add(out.background_term, out.object_term);
  return out;
}

Interpolated interpolate_with(const Tensor& z_o, const Tensor& z_b, const Tensor& y, std::vector<std::size_t> partner,
                              std::vector<double> delta) {
  check_pair(z_o, z_b, y);
  const std::size_t n = z_o.dim(0), width = 2 * z_o.dim(1), k = y.dim(1);
  check_permutation(partner, n, "interpolate partner");
  if (delta.size() != n) throw ContractViolation("interpolate: one delta per pair required");
  for (double d : delta)
    if (!(d >= 0.0 && d <= 1.0)) throw ContractViolation("interpolate: delta must lie in [0, 1]");

  Tensor z = concat_over_axis({z_o, detach(z_b)}, 1);
  std::vector<double> w_self(n * width), w_other(n * width), y_mix(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill_n(w_self.begin() + i * width, width, delta[i]);
    std::fill_n(w_other.begin() + i * width, width, 1.0 - delta[i]);
    for (std::size_t c = 0; c < k; ++c)
      y_mix[i * k + c] = delta[i] * y[i * k + c] + (1.0 - delta[i]) * y[partner[i] * k + c];
  }
  Interpolated out;
  out.z_mix = add(mul(z, Tensor::from({n, width}, std::move(w_self))),
                  mul(gather_rows(z, partner), Tensor::from({n, width}, std::move(w_other))));
  out.y_mix = Tensor::from({n, k}, std::move(y_mix));
  out.partner = std::move(partner);
  out.delta = std::move(delta);
  return out;
}

Interpolated interpolate_combine(const Tensor& z_o, const Tensor& z_b, const Tensor& y, Rng& rng, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("interpolate: alpha must be > 0");
  check_pair(z_o, z_b, y);
  const std::size_t n = z_o.dim(0);
  if (n < 2) throw ConfigError("interpolation needs a batch of at least 2 samples");
  auto partner = random_permutation(n, rng);
  std::vector<double> delta(n);
  for (auto& d : delta) d = sample_beta(alpha, rng);
  return interpolate_with(z_o, z_b, y, std::move(partner), std::move(delta));
}

Tensor total_loss(const Tensor& cls, const Tensor& contr, const Tensor& shuffle, double lambda, std::size_t epoch,
                  std::size_t t_aug) {
  Tensor total = cls;
  if (lambda != 0.0) total = add(total, scalar_mul(contr, lambda));
  if (epoch >= t_aug && shuffle.defined()) total = add(total, shuffle);
  return total;
}

LossParts compute_losses(const Model& model, const Tensor& images, const Tensor& y, const TrainConfig& config,
                         std::size_t epoch, Rng& shuffle_rng) {
  LossParts parts;
  auto taps = model.backbone_forward(images);
  auto feats = model.aggregate(taps.deep, taps.shallow);
  parts.logits_o = model.classify(feats.z_o);
  parts.cls = config.disentangle
                  ? classification_loss(parts.logits_o, model.classify(feats.z_b), y, config.eps_log)
                  : bce_with_logits(parts.logits_o, y, config.eps_log);
  parts.contr = contrastive_loss(feats.z_o, feats.z_b, config.eps_log);
  if (epoch >= config.t_aug && config.shuffle_mode != ShuffleMode::Off) {
    if (config.shuffle_mode == ShuffleMode::Interpolate) {
      auto mix = interpolate_combine(feats.z_o, feats.z_b, y, shuffle_rng, config.alpha);
      parts.shuffle = bce_with_logits(model.classify_shuffled(mix.z_mix), mix.y_mix, config.eps_log);
    } else {
      auto shuffled = shuffle_augment(feats.z_o, feats.z_b, y, shuffle_rng);
      parts.shuffle = shuffle_loss(model, shuffled, y, config.shuffle_mode, config.eps_log).total;
    }
  }
  parts.total = total_loss(parts.cls, parts.contr, parts.shuffle, config.lambda, epoch, config.t_aug);
  return parts;
}

// ---------------------------------------------------------------------------
// Training

InMemorySplit load_split(const Manifest& manifest) {
  InMemorySplit out;
  out.num_classes = manifest.spec.num_classes;
  out.samples.reserve(manifest.rows.size());
  for (const auto& row : manifest.rows) out.samples.push_back(load_sample(manifest, row));
  if (out.samples.empty()) throw IntegrityError("split '" + manifest.split + "' has no samples");
  out.height = out.samples.front().height;
  out.width = out.samples.front().width;
  for (const auto& s : out.samples)
    if (s.height != out.height || s.width != out.width)
      throw IntegrityError("split '" + manifest.split + "' mixes image sizes");
  return out;
}

std::pair<Tensor, Tensor> make_batch(const InMemorySplit& data, std::span<const std::size_t> indices) {
  const std::size_t n = indices.size(), per = data.channels * data.height * data.width, k = data.num_classes;
  std::vector<double> images(n * per), labels(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = data.samples.at(indices[i]);
    std::copy(s.image.begin(), s.image.end(), images.begin() + static_cast<std::ptrdiff_t>(i * per));
    std::copy(s.label.begin(), s.label.end(), labels.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return {Tensor::from({n, data.channels, data.height, data.width}, std::move(images)),
          Tensor::from({n, k}, std::move(labels))};
}

std::vector<EpochMetrics> train(const TrainConfig& config, const InMemorySplit& data, Model& model,
                                const EpochCallback& on_epoch) {
  config.validate();
  if (data.num_classes != model.config().num_classes)
    throw ConfigError("dataset has " + std::to_string(data.num_classes) + " classes, model expects " +
                      std::to_string(model.config().num_classes));
  const std::size_t n = data.samples.size();
  // Trailing batches smaller than 2 are dropped so shuffling always has a partner.
  std::vector<std::pair<std::size_t, std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += config.batch_size) {
    const std::size_t len = std::min(config.batch_size, n - start);
    if (len >= 2 || config.batch_size == 1) batches.emplace_back(start, len);
  }
  if (batches.empty()) throw ConfigError("training split is too small for one batch");
  const std::size_t max_iter = config.epochs * batches.size();

  Rng order_rng(derive_seed(config.seed, 0x6f72646572ULL, 0));
  Rng shuffle_rng(derive_seed(config.seed, 0x73687566ULL, 0));
  model.set_trainable(true);

  std::vector<EpochMetrics> log;
  std::size_t iter = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = random_permutation(n, order_rng);
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = poly_lr(config.lr, iter, max_iter, config.poly_power);
    std::size_t correct = 0, seen = 0;
    for (const auto& [start, len] : batches) {
      auto [images, y] = make_batch(data, std::span(order).subspan(start, len));
      auto parts = compute_losses(model, images, y, config, epoch, shuffle_rng);
      parts.total.backward();
      // Heads outside the active objective (f_s before t_aug) step with a zero gradient.
      for (auto& p : model.parameters())
        if (!p.tensor.has_grad()) p.tensor.mutable_grad();
      clip_grad_norm(model.parameters(), config.grad_clip);
      sgd_step(model.parameters(), poly_lr(config.lr, iter, max_iter, config.poly_power), config.momentum);
      ++iter;

      m.loss_cls += parts.cls.item() * static_cast<double>(len);
      m.loss_contr += parts.contr.item() * static_cast<double>(len);
      if (parts.shuffle.defined()) m.loss_shuffle += parts.shuffle.item() * static_cast<double>(len);
      const std::size_t k = y.dim(1);
      for (std::size_t i = 0; i < len; ++i) {
        bool all = true;
        for (std::size_t c = 0; c < k; ++c) all &= (parts.logits_o[i * k + c] > 0.0) == (y[i * k + c] > 0.5);
        correct += all ? 1 : 0;
      }
      seen += len;
    }
    const auto denom = static_cast<double>(seen);
    m.loss_cls /= denom;
    m.loss_contr /= denom;
    m.loss_shuffle /= denom;
    m.train_acc = static_cast<double>(correct) / denom;
    log.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return log;
}

std::string metrics_csv(const std::vector<EpochMetrics>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,lr,loss_cls,loss_contr,loss_shuffle,train_acc\n";
  for (const auto& m : log)
    os << m.epoch << ',' << m.lr << ',' << m.loss_cls << ',' << m.loss_contr << ',' << m.loss_shuffle << ','
       << m.train_acc << '\n';
  return os.str();
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& log) {
  write_file_atomic(path, metrics_csv(log));
}

}  // namespace sma

#include "sma/experiment.hpp"

#include <cmath>
#include <sstream>

#include "sma/errors.hpp"
#include "sma/rng.hpp"

namespace sma {

namespace {

struct KeyDoc {
  const char* key;
  const char* fallback;
  const char* doc;
};

// Order here is the order of the template and of the canonical echo.
const KeyDoc kKeys[] = {
    {"arm", "sma", "label used by `report` to name this run"},
    {"data_dir", "data", "dataset directory written by `gen` and read by `train`"},
    {"num_classes", "5", "object classes K"},
    {"num_backgrounds", "5", "background textures B"},
    {"bias_ratio", "0.9", "fraction of objects drawn on their class's own background, >= 1/B"},
    {"image_size", "64", "square image side, divisible by 8"},
    {"train_samples", "2000", "training images"},
    {"val_samples", "500", "validation images"},
    {"max_objects_per_image", "2", "1 or 2"},
    {"data_seed", "0", "dataset generation seed"},
    {"feature_channels", "64", "backbone output width C"},
    {"attention_channels", "8", "attention maps per aggregator d"},
    {"epochs", "10", "training epochs"},
    {"t_aug", "6", "first epoch (0-based) with shuffle augmentation"},
    {"disentangle", "true", "false trains the plain classifier baseline (needs lambda = 0, shuffle_mode = off)"},
    {"lambda", "0.5", "weight of the contrastive loss; 0 disables it"},
    {"lr", "0.1", "base learning rate, poly-decayed"},
    {"momentum", "0.9", "SGD momentum"},
    {"poly_power", "0.9", "exponent of the poly schedule"},
    {"batch_size", "16", "samples per step"},
    {"grad_clip", "0.5", "bound on the global gradient L2 norm per step; 0 disables"},
    {"eps_log", "1e-7", "floor applied inside every log"},
    {"shuffle_mode", "two_way", "off | background_only | two_way | interpolate"},
    {"alpha", "0.6", "Beta(alpha, alpha) parameter for interpolate mode"},
    {"seed", "0", "training seed (initialization, batch order, shuffles)"},
    {"ig_steps", "128", "Integrated Gradients steps m"},
    {"ig_chunk", "16", "interpolation points per backward pass"},
    {"analysis_max_per_class", "0", "cap on attributed samples per class and split; 0 = all"},
    {"tau", "0.25", "CAM threshold for pseudo-masks, in (0, 1)"},
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void ExperimentConfig::validate() const {
  data.validate();
  train.validate();
  if (model.num_classes != data.num_classes) throw ConfigError("model and dataset disagree on num_classes");
  if (model.feature_channels < 1 || model.attention_channels < 1)
    throw ConfigError("feature_channels and attention_channels must be >= 1");
  if (ig_steps < 1) throw ConfigError("ig_steps must be >= 1");
  if (ig_chunk < 1) throw ConfigError("ig_chunk must be >= 1");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1), got " + fmt(tau));
  if (arm.empty() || arm.find_first_of(",/\\ \t") != std::string::npos)
    throw ConfigError("arm must be a non-empty label without separators or spaces");
}

ExperimentConfig experiment_config(const KeyValueConfig& kv) {
  std::set<std::string> allowed;
  for (const auto& k : kKeys) allowed.insert(k.key);
  kv.reject_unknown(allowed);

  ExperimentConfig c;
  c.arm = kv.get_string("arm", c.arm);
  c.data_dir = kv.get_string("data_dir", c.data_dir.string());
  c.data.num_classes = kv.get_uint("num_classes", c.data.num_classes);
  c.data.num_backgrounds = kv.get_uint("num_backgrounds", c.data.num_backgrounds);
  c.data.bias_ratio = kv.get_double("bias_ratio", c.data.bias_ratio);
  c.data.image_size = kv.get_uint("image_size", c.data.image_size);
  c.data.train_samples = kv.get_uint("train_samples", c.data.train_samples);
  c.data.val_samples = kv.get_uint("val_samples", c.data.val_samples);
  c.data.max_objects_per_image = kv.get_uint("max_objects_per_image", c.data.max_objects_per_image);
  c.data.seed = kv.get_uint("data_seed", c.data.seed);
  c.model.num_classes = c.data.num_classes;
  c.model.feature_channels = kv.get_uint("feature_channels", c.model.feature_channels);
  c.model.attention_channels = kv.get_uint("attention_channels", c.model.attention_channels);
  c.train.epochs = kv.get_uint("epochs", c.train.epochs);
  c.train.t_aug = kv.get_uint("t_aug", c.train.t_aug);
  c.train.disentangle = kv.get_bool("disentangle", c.train.disentangle);
  c.train.lambda = kv.get_double("lambda", c.train.lambda);
  c.train.lr = kv.get_double("lr", c.train.lr);
  c.train.momentum = kv.get_double("momentum", c.train.momentum);
  c.train.poly_power = kv.get_double("poly_power", c.train.poly_power);
  c.train.batch_size = kv.get_uint("batch_size", c.train.batch_size);
  c.train.grad_clip = kv.get_double("grad_clip", c.train.grad_clip);
  c.train.eps_log = kv.get_double("eps_log", c.train.eps_log);
  c.train.shuffle_mode = parse_shuffle_mode(kv.get_string("shuffle_mode", to_string(c.train.shuffle_mode)));
  c.train.alpha = kv.get_double("alpha", c.train.alpha);
  c.train.seed = kv.get_uint("seed", c.train.seed);
  c.ig_steps = kv.get_uint("ig_steps", c.ig_steps);
  c.ig_chunk = kv.get_uint("ig_chunk", c.ig_chunk);
  c.analysis_max_per_class = kv.get_uint("analysis_max_per_class", c.analysis_max_per_class);
  c.tau = kv.get_double("tau", c.tau);
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return experiment_config(KeyValueConfig::load(path));
}

std::string config_template() {
  std::ostringstream os;
  os << "# sma experiment configuration. One `key = value` per line; unknown keys are rejected.\n";
  for (const auto& k : kKeys) os << "\n# " << k.doc << "\n" << k.key << " = " << k.fallback << "\n";
  return os.str();
}

std::string config_echo(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "arm = " << c.arm << "\n"
     << "data_dir = " << c.data_dir.string() << "\n"
     << dataset_spec_echo(c.data)
     << "feature_channels = " << c.model.feature_channels << "\n"
     << "attention_channels = " << c.model.attention_channels << "\n"
     << "epochs = " << c.train.epochs << "\n"
     << "t_aug = " << c.train.t_aug << "\n"
     << "disentangle = " << (c.train.disentangle ? "true" : "false") << "\n"
     << "lambda = " << fmt(c.train.lambda) << "\n"
     << "lr = " << fmt(c.train.lr) << "\n"
     << "momentum = " << fmt(c.train.momentum) << "\n"
     << "poly_power = " << fmt(c.train.poly_power) << "\n"
     << "batch_size = " << c.train.batch_size << "\n"
     << "grad_clip = " << fmt(c.train.grad_clip) << "\n"
     << "eps_log = " << fmt(c.train.eps_log) << "\n"
     << "shuffle_mode = " << to_string(c.train.shuffle_mode) << "\n"
     << "alpha = " << fmt(c.train.alpha) << "\n"
     << "seed = " << c.train.seed << "\n"
     << "ig_steps = " << c.ig_steps << "\n"
     << "ig_chunk = " << c.ig_chunk << "\n"
     << "analysis_max_per_class = " << c.analysis_max_per_class << "\n"
     << "tau = " << fmt(c.tau) << "\n";
  return os.str();
}

std::string run_name(const ExperimentConfig& cfg) {
  ExperimentConfig unseeded = cfg;
  unseeded.train.seed = 0;
  Fnv1a h;
  h.update(config_echo(unseeded));
  return cfg.arm + "-" + h.hex().substr(0, 8) + "-seed" + std::to_string(cfg.train.seed);
}

LocalizationReport evaluate_localization(const Model& model, const std::vector<SampleRecord>& samples,
                                         std::size_t num_classes, double tau, bool keep_masks) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1), got " + fmt(tau));
  ConfusionMatrix all(num_classes), aligned(num_classes), conflicting(num_classes);
  LocalizationReport report;
  for (const auto& s : samples) {
    const auto loc = cam(model, s.image, s.height, s.width, s.classes());
    auto pred = threshold_mask(loc, tau);
    all.add(pred, s.object_mask);
    (s.bias_aligned ? aligned : conflicting).add(pred, s.object_mask);
    report.per_image_miou.push_back(miou(pred, s.object_mask, num_classes).miou);
    if (keep_masks) report.masks.push_back(std::move(pred));
  }
  report.all = evaluate_confusion(all);
  report.aligned = evaluate_confusion(aligned);
  report.conflicting = evaluate_confusion(conflicting);
  return report;
}

std::string per_image_iou_csv(const std::vector<SampleRecord>& samples, const LocalizationReport& report,
                              const std::vector<std::string>& names) {
  if (names.size() != samples.size() || report.per_image_miou.size() != samples.size())
    throw ContractViolation("per-image IoU rows do not match the sample list");
  std::ostringstream os;
  os.precision(17);
  os << "image,bias_aligned,miou\n";
  for (std::size_t i = 0; i < samples.size(); ++i)
    os << names[i] << ',' << (samples[i].bias_aligned ? 1 : 0) << ',' << report.per_image_miou[i] << '\n';
  return os.str();
}

SplitAttribution split_means(const std::vector<PairRow>& rows, const std::string& split) {
  SplitAttribution out;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.split != split) continue;
    out.mean_sur += r.mean_sur;
    out.mean_bar += r.mean_bar;
    ++n;
  }
  if (n == 0) return {NAN, NAN};
  out.mean_sur /= static_cast<double>(n);
  out.mean_bar /= static_cast<double>(n);
  return out;
}

}  // namespace sma

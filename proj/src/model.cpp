#include "sma/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <random>

#include "sma/errors.hpp"
#include "sma/image_io.hpp"
#include "sma/rng.hpp"

namespace sma {

namespace {

Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

std::string stage_name(int stage, const char* what) {
  return "stage" + std::to_string(stage) + ".conv." + what;
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config) {
  if (config.num_classes < 1 || config.feature_channels < 1 || config.attention_channels < 1)
    throw ConfigError("model dimensions must be positive");
  Rng rng(derive_seed(seed, 0x6d6f64656cULL, 0));
  const std::size_t c = config.feature_channels, d = config.attention_channels, k = config.num_classes;
  const std::size_t widths[5] = {3, kStageChannels[0], kStageChannels[1], kStageChannels[2], c};
  for (int s = 1; s <= 4; ++s) {
    const std::size_t in = widths[s - 1], out = widths[s];
    params_.emplace_back(stage_name(s, "weight"), kaiming({out, in, 3, 3}, in * 9, rng));
    params_.emplace_back(stage_name(s, "bias"), Tensor::zeros({out}));
  }
  params_.emplace_back("aggregator_o.phi.weight", kaiming({d, c, 1, 1}, c, rng));
  params_.emplace_back("aggregator_o.phi.bias", Tensor::zeros({d}));
  params_.emplace_back("aggregator_b.theta.weight", kaiming({d, kShallowChannels, 1, 1}, kShallowChannels, rng));
  params_.emplace_back("aggregator_b.theta.bias", Tensor::zeros({d}));
  params_.emplace_back("head_f.weight", fan_in_uniform({k, c}, c, rng));
  params_.emplace_back("head_f.bias", Tensor::zeros({k}));
  params_.emplace_back("head_fs.weight", fan_in_uniform({k, 2 * c}, 2 * c, rng));
  params_.emplace_back("head_fs.bias", Tensor::zeros({k}));
}

Parameter& Model::param(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ContractViolation("model has no parameter '" + name + "'");
}

const Parameter& Model::param(const std::string& name) const {
  return const_cast<Model*>(this)->param(name);
}

void Model::set_trainable(bool on) {
  for (auto& p : params_) {
    p.tensor.set_requires_grad(on);
    if (!on) p.tensor.clear_grad();
  }
}

Tensor Model::conv_stage(const Tensor& x, int stage, std::size_t stride) const {
  return relu(conv2d(x, value(stage_name(stage, "weight")), value(stage_name(stage, "bias")), stride, 1));
}

BackboneOutput Model::backbone_forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw ContractViolation("backbone_forward: expected N×3×H×W, got " + to_string(images.shape()));
  if (images.dim(2) % 8 != 0 || images.dim(3) % 8 != 0)
    throw ContractViolation("backbone_forward: H and W must be divisible by 8, got " + to_string(images.shape()));
  // Centering about mid-gray conditions the unnormalized stack; the all-zero
  // (black) image stays the attribution baseline in input space.
  Tensor s1 = conv_stage(add_scalar(images, -kInputCenter), 1, 1);
  Tensor s2 = conv_stage(s1, 2, 2);
  Tensor s3 = conv_stage(s2, 3, 2);
  Tensor s4 = conv_stage(s3, 4, 2);
  return {avg_pool2d(s2, 4), s4};
}

Disentangled Model::aggregate(const Tensor& deep, const Tensor& shallow) const {
  if (deep.rank() != 4 || shallow.rank() != 4 || deep.dim(0) != shallow.dim(0) || deep.dim(2) != shallow.dim(2) ||
      deep.dim(3) != shallow.dim(3))
    throw ContractViolation("aggregate: taps do not align: " + to_string(deep.shape()) + " vs " +
                            to_string(shallow.shape()));
  const std::size_t n = deep.dim(0), c = deep.dim(1), hw = deep.dim(2) * deep.dim(3);
  const std::size_t d = config_.attention_channels;
  Tensor values_t = transpose(reshape(deep, {n, c, hw}));  // N×hw×C

  auto attend = [&](const Tensor& source, const char* w, const char* b) {
    Tensor logits = conv2d(source, value(w), value(b), 1, 0);
    return softmax_over_axis(reshape(logits, {n, d, hw}), 2);
  };
  Disentangled out;
  out.attn_o = attend(deep, "aggregator_o.phi.weight", "aggregator_o.phi.bias");
  out.attn_b = attend(shallow, "aggregator_b.theta.weight", "aggregator_b.theta.bias");
  out.z_o = mean_over_axis(matmul(out.attn_o, values_t), 1);
  out.z_b = mean_over_axis(matmul(out.attn_b, values_t), 1);
  return out;
}

Tensor Model::classify(const Tensor& rep) const {
  if (rep.rank() != 2 || rep.dim(1) != config_.feature_channels)
    throw ContractViolation("classify: expected N×" + std::to_string(config_.feature_channels) + ", got " +
                            to_string(rep.shape()));
  return add(matmul(rep, transpose(value("head_f.weight"))), value("head_f.bias"));
}

Tensor Model::classify_shuffled(const Tensor& rep) const {
  if (rep.rank() != 2 || rep.dim(1) != 2 * config_.feature_channels)
    throw ContractViolation("classify_shuffled: expected N×" + std::to_string(2 * config_.feature_channels) +
                            ", got " + to_string(rep.shape()));
  return add(matmul(rep, transpose(value("head_fs.weight"))), value("head_fs.bias"));
}

Tensor Model::object_logits(const Tensor& images) const {
  auto taps = backbone_forward(images);
  return classify(aggregate(taps.deep, taps.shallow).z_o);
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[4] = {'S', 'M', 'A', 'C'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Cursor {
 public:
  explicit Cursor(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  template <class T>
  T get(const char* what) {
    if (bytes_.size() - pos_ < sizeof(T)) throw ParseError(std::string("truncated checkpoint reading ") + what, pos_);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw ParseError("truncated checkpoint reading tensor name", pos_);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put<std::uint8_t>(out, 0);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : p.tensor.values()) put<double>(out, v);
  }
  return out;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(model));
}

Model decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw ParseError("truncated checkpoint: no magic", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint: bad magic");
  Cursor cur(bytes);
  cur.get<std::uint32_t>("magic");
  const auto version = cur.get<std::uint32_t>("version");
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = cur.get<std::uint32_t>("tensor count");

  std::map<std::string, std::pair<Shape, std::vector<double>>> stored;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = cur.get<std::uint16_t>("name length");
    std::string name = cur.get_string(len);
    const auto dtype = cur.get<std::uint8_t>("dtype");
    if (dtype != 0) throw FormatError("tensor '" + name + "' has unsupported dtype code " + std::to_string(dtype));
    const auto ndim = cur.get<std::uint8_t>("ndim");
    Shape shape;
    for (std::uint8_t i = 0; i < ndim; ++i) shape.push_back(cur.get<std::uint32_t>("dims"));
    if (numel(shape) > (bytes.size() - cur.pos()) / sizeof(double))
      throw ParseError("truncated checkpoint: tensor '" + name + "' claims " + to_string(shape), cur.pos());
    std::vector<double> values(numel(shape));
    for (auto& v : values) v = cur.get<double>("values");
    if (!stored.emplace(name, std::make_pair(shape, std::move(values))).second)
      throw FormatError("duplicate tensor '" + name + "' in checkpoint");
  }
  if (!cur.done()) throw ParseError("trailing bytes after last tensor", cur.pos());

  auto shape_of = [&](const std::string& name) -> const Shape& {
    auto it = stored.find(name);
    if (it == stored.end()) throw FormatError("checkpoint lacks tensor '" + name + "'");
    return it->second.first;
  };
  ModelConfig cfg;
  cfg.feature_channels = shape_of("stage4.conv.weight").at(0);
  cfg.attention_channels = shape_of("aggregator_o.phi.weight").at(0);
  cfg.num_classes = shape_of("head_f.weight").at(0);
  Model model(cfg, 0);
  if (stored.size() != model.parameters().size())
    throw FormatError("checkpoint holds " + std::to_string(stored.size()) + " tensors, model expects " +
                      std::to_string(model.parameters().size()));
  for (auto& p : model.parameters()) {
    const auto& shape = shape_of(p.name);
    const auto& values = stored.find(p.name)->second.second;
    if (shape != p.tensor.shape())
      throw FormatError("tensor '" + p.name + "' has shape " + to_string(shape) + ", expected " +
                        to_string(p.tensor.shape()));
    std::copy(values.begin(), values.end(), p.tensor.mutable_values().begin());
  }
  return model;
}

Model load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace sma

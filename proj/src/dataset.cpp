#include "sma/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "sma/config.hpp"
#include "sma/errors.hpp"
#include "sma/rng.hpp"

namespace sma {

namespace fs = std::filesystem;

namespace {

// Jitter ranges. Object areas are fractions of the full image.
constexpr double kSingleAreaMin = 0.07, kSingleAreaMax = 0.14;
constexpr double kPairAreaMin = 0.045, kPairAreaMax = 0.075;
constexpr double kRotationJitter = 25.0 * std::numbers::pi / 180.0;
constexpr double kBrightnessJitter = 0.08;
constexpr double kPixelNoise = 0.03;
constexpr double kMinCoverage = 0.04, kMaxCoverage = 0.40;

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0), f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

enum class ShapeKind { Circle, Triangle, Square, Cross, Ring };

// Area of each shape in units of r^2 (r = circumscribing radius parameter).
double area_factor(ShapeKind k) {
  switch (k) {
    case ShapeKind::Circle: return std::numbers::pi;
    case ShapeKind::Triangle: return 3.0 * std::sqrt(3.0) / 4.0;
    case ShapeKind::Square: return 4.0 * 0.85 * 0.85;
    case ShapeKind::Cross: return 2.0 * 2.0 * 0.7 - 0.7 * 0.7;
    case ShapeKind::Ring: return std::numbers::pi * (1.0 - 0.55 * 0.55);
  }
  return 1.0;
}

bool inside_shape(ShapeKind k, double x, double y) {  // unit circumradius
  switch (k) {
    case ShapeKind::Circle: return x * x + y * y <= 1.0;
    case ShapeKind::Ring: {
      const double d = x * x + y * y;
      return d <= 1.0 && d >= 0.55 * 0.55;
    }
    case ShapeKind::Square: return std::abs(x) <= 0.85 && std::abs(y) <= 0.85;
    case ShapeKind::Cross:
      return (std::abs(x) <= 1.0 && std::abs(y) <= 0.35) || (std::abs(y) <= 1.0 && std::abs(x) <= 0.35);
    case ShapeKind::Triangle: {
      // Equilateral, vertices on the unit circle, apex up; inradius 1/2.
      constexpr double kNormals[3] = {-std::numbers::pi / 2, std::numbers::pi / 6, 5 * std::numbers::pi / 6};
      for (double a : kNormals)
        if (std::cos(a) * x + std::sin(a) * y > 0.5) return false;
      return true;
    }
  }
  return false;
}

struct Region {
  double x0, x1;  // horizontal pixel extent; vertical is the whole image
};

struct Placed {
  std::size_t cls;
  ShapeKind kind;
  double cx, cy, radius, angle;
  Rgb color;
};

class Renderer {
 public:
  Renderer(const DatasetSpec& spec, std::mt19937_64& rng) : spec_(spec), rng_(rng) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

  Rgb object_color(std::size_t cls) {
    const double hue = static_cast<double>(cls) / static_cast<double>(spec_.num_classes);
    return hsv(hue, 0.85, 0.88 + uniform(-kBrightnessJitter, kBrightnessJitter));
  }

  Placed place(std::size_t cls, Region region, double area_min, double area_max) {
    const double s = static_cast<double>(spec_.image_size);
    Placed p{cls, static_cast<ShapeKind>(cls % 5), 0, 0, 0, 0, object_color(cls)};
    const double area = uniform(area_min, area_max) * s * s;
    p.radius = std::sqrt(area / area_factor(p.kind));
    const double reach = 1.07 * p.radius;
    const double lo_x = region.x0 + reach, hi_x = region.x1 - reach;
    p.cx = lo_x < hi_x ? uniform(lo_x, hi_x) : 0.5 * (region.x0 + region.x1);
    p.cy = uniform(reach, s - reach);
    p.angle = uniform(-kRotationJitter, kRotationJitter);
    return p;
  }

  // Fills `region` columns of `rgb` (H×W×3 interleaved) with texture `bg`.
  void texture(std::size_t bg, Region region, std::vector<double>& rgb) {
    const std::size_t s = spec_.image_size;
    const double hue = static_cast<double>(bg) / static_cast<double>(spec_.num_backgrounds) + 0.1;
    const Rgb c1 = hsv(hue, 0.35, 0.60), c2 = hsv(hue + 0.5, 0.30, 0.30);
    const double phase_x = uniform(0, 8), phase_y = uniform(0, 8);
    const double angle = uniform(-0.35, 0.35) + (bg % 5 == 3 ? uniform(0, 2 * std::numbers::pi) : std::numbers::pi / 4);
    const double period = uniform(7.0, 9.0);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t y = 0; y < s; ++y) {
      for (auto x = static_cast<std::size_t>(region.x0); x < static_cast<std::size_t>(region.x1); ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        double t = 0.0;  // 0 → c1, 1 → c2
        switch (bg % 5) {
          case 0:  // stripes
            t = std::sin(2 * std::numbers::pi * ((px * ca + py * sa) / period) + phase_x) > 0 ? 1.0 : 0.0;
            break;
          case 1: {  // checker
            const auto cx = static_cast<long>(std::floor((px + phase_x) / 8.0));
            const auto cy = static_cast<long>(std::floor((py + phase_y) / 8.0));
            t = ((cx + cy) % 2 == 0) ? 0.0 : 1.0;
            break;
          }
          case 2:  // uniform noise
            t = uniform(0.0, 1.0);
            break;
          case 3: {  // gradient
            const double u = ((px - s / 2.0) * ca + (py - s / 2.0) * sa) / static_cast<double>(s);
            t = std::clamp(u + 0.5, 0.0, 1.0);
            break;
          }
          default: {  // dots
            const double dx = std::fmod(px + phase_x, 8.0) - 4.0;
            const double dy = std::fmod(py + phase_y, 8.0) - 4.0;
            t = dx * dx + dy * dy <= 4.0 ? 1.0 : 0.0;
            break;
          }
        }
        double* out = rgb.data() + (y * s + x) * 3;
        out[0] = (1 - t) * c1.r + t * c2.r;
        out[1] = (1 - t) * c1.g + t * c2.g;
        out[2] = (1 - t) * c1.b + t * c2.b;
      }
    }
  }

  void draw(const Placed& p, std::vector<double>& rgb, std::vector<std::uint8_t>& mask) {
    const std::size_t s = spec_.image_size;
    const double ca = std::cos(p.angle), sa = std::sin(p.angle);
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double dx = (static_cast<double>(x) + 0.5 - p.cx) / p.radius;
        const double dy = (static_cast<double>(y) + 0.5 - p.cy) / p.radius;
        if (!inside_shape(p.kind, ca * dx + sa * dy, -sa * dx + ca * dy)) continue;
        mask[y * s + x] = static_cast<std::uint8_t>(p.cls + 1);
        double* out = rgb.data() + (y * s + x) * 3;
        out[0] = p.color.r;
        out[1] = p.color.g;
        out[2] = p.color.b;
      }
    }
  }

 private:
  const DatasetSpec& spec_;
  std::mt19937_64& rng_;
};

std::uint64_t split_salt(Split split) { return split == Split::Train ? 0x7472616eULL : 0x76616cULL; }

std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? ";" : "") + std::to_string(ids[i]);
  return out;
}

std::string sample_stem(std::size_t index) {
  std::string s = std::to_string(index);
  return std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

}  // namespace

void DatasetSpec::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (num_classes > 254) throw ConfigError("num_classes must fit an 8-bit mask");
  if (num_backgrounds < 2) throw ConfigError("num_backgrounds must be >= 2");
  if (!(bias_ratio >= 1.0 / static_cast<double>(num_backgrounds) - 1e-12) || bias_ratio > 1.0)
    throw ConfigError("bias_ratio must lie in [1/num_backgrounds, 1]");
  if (image_size < 32) throw ConfigError("image_size must be >= 32");
  if (image_size % 8 != 0) throw ConfigError("image_size must be divisible by 8");
  if (max_objects_per_image < 1 || max_objects_per_image > 2)
    throw ConfigError("max_objects_per_image must be 1 or 2");
  if (max_objects_per_image == 2 && num_classes < 2) throw ConfigError("two-object images need two classes");
}

const char* split_name(Split split) { return split == Split::Train ? "train" : "val"; }

std::vector<std::size_t> SampleRecord::classes() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < label.size(); ++k)
    if (label[k] > 0.5) out.push_back(k);
  return out;
}

SampleRecord render_sample(const DatasetSpec& spec, Split split, std::size_t index) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, split_salt(split), index));
  Renderer r(spec, rng);
  const std::size_t s = spec.image_size;
  const std::size_t num_objects =
      spec.max_objects_per_image == 1 ? 1 : 1 + std::uniform_int_distribution<std::size_t>(0, 1)(rng);

  // Distinct classes, ascending; each gets an independent bias coin.
  std::vector<std::size_t> classes(spec.num_classes);
  for (std::size_t k = 0; k < classes.size(); ++k) classes[k] = k;
  std::shuffle(classes.begin(), classes.end(), rng);
  classes.resize(num_objects);
  std::sort(classes.begin(), classes.end());

  std::vector<std::size_t> backgrounds;
  bool aligned = true;
  for (auto cls : classes) {
    const std::size_t paired = cls % spec.num_backgrounds;
    if (r.uniform(0.0, 1.0) < spec.bias_ratio) {
      backgrounds.push_back(paired);
    } else {
      auto other = std::uniform_int_distribution<std::size_t>(0, spec.num_backgrounds - 2)(rng);
      backgrounds.push_back(other >= paired ? other + 1 : other);
      aligned = false;
    }
  }

  // Two-object images split into left/right halves, one object and texture each.
  std::vector<std::size_t> half_of{0, 1};
  if (num_objects == 2 && r.uniform(0.0, 1.0) < 0.5) half_of = {1, 0};

  const double sd = static_cast<double>(s);
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<double> rgb(s * s * 3);
    std::vector<std::uint8_t> mask(s * s, 0);
    for (std::size_t i = 0; i < num_objects; ++i) {
      Region region = num_objects == 1 ? Region{0, sd} : Region{half_of[i] * sd / 2, (half_of[i] + 1) * sd / 2};
      r.texture(backgrounds[i], region, rgb);
    }
    for (std::size_t i = 0; i < num_objects; ++i) {
      Region region = num_objects == 1 ? Region{0, sd} : Region{half_of[i] * sd / 2, (half_of[i] + 1) * sd / 2};
      const auto placed = num_objects == 1 ? r.place(classes[i], region, kSingleAreaMin, kSingleAreaMax)
                                           : r.place(classes[i], region, kPairAreaMin, kPairAreaMax);
      r.draw(placed, rgb, mask);
    }
    const auto covered = static_cast<double>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
    const double coverage = covered / (sd * sd);
    bool all_present = true;
    for (auto cls : classes)
      all_present &= std::find(mask.begin(), mask.end(), static_cast<std::uint8_t>(cls + 1)) != mask.end();
    if (coverage < kMinCoverage || coverage > kMaxCoverage || !all_present) continue;

    SampleRecord rec;
    rec.height = rec.width = s;
    rec.image.resize(3 * s * s);
    std::normal_distribution<double> noise(0.0, kPixelNoise);
    for (std::size_t p = 0; p < s * s; ++p) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(rgb[p * 3 + c] + noise(rng), 0.0, 1.0);
        rec.image[c * s * s + p] = std::round(v * 255.0) / 255.0;  // stored as on disk
      }
    }
    rec.label.assign(spec.num_classes, 0.0);
    for (auto cls : classes) rec.label[cls] = 1.0;
    rec.object_mask = std::move(mask);
    rec.object_backgrounds = backgrounds;
    rec.background_id = backgrounds.front();
    rec.bias_aligned = aligned;
    return rec;
  }
  throw IntegrityError("render_sample: could not satisfy coverage bounds for sample " + std::to_string(index));
}

namespace {

Image8 to_ppm(const SampleRecord& rec) {
  Image8 img{rec.width, rec.height, 3, std::vector<std::uint8_t>(rec.width * rec.height * 3)};
  const std::size_t plane = rec.width * rec.height;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      img.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(rec.image[c * plane + p] * 255.0));
  return img;
}

}  // namespace

std::vector<Manifest> generate_dataset(const DatasetSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<Manifest> out;
  for (Split split : {Split::Train, Split::Val}) {
    Manifest m{split_name(split), spec, out_dir, {}};
    const std::size_t count = split == Split::Train ? spec.train_samples : spec.val_samples;
    fs::create_directories(out_dir / m.split, ec);
    if (ec) throw IoError("cannot create " + (out_dir / m.split).string() + ": " + ec.message());
    for (std::size_t i = 0; i < count; ++i) {
      const auto rec = render_sample(spec, split, i);
      ManifestRow row;
      row.image = m.split + "/" + sample_stem(i) + ".ppm";
      row.mask = m.split + "/" + sample_stem(i) + "_mask.pgm";
      row.label = rec.classes();
      row.backgrounds = rec.object_backgrounds;
      row.bias_aligned = rec.bias_aligned;
      write_pnm(out_dir / row.image, to_ppm(rec));
      write_pnm(out_dir / row.mask, Image8{rec.width, rec.height, 1, rec.object_mask});
      m.rows.push_back(std::move(row));
    }
    write_manifest(m);
    out.push_back(std::move(m));
  }
  write_file_atomic(out_dir / "dataset.cfg", dataset_spec_echo(spec));
  return out;
}

void write_manifest(const Manifest& manifest) {
  std::string csv = "image,mask,label,background_id,bias_aligned\n";
  for (const auto& r : manifest.rows) {
    csv += r.image + "," + r.mask + "," + join_ids(r.label) + "," + join_ids(r.backgrounds) + "," +
           (r.bias_aligned ? "1" : "0") + "\n";
  }
  write_file_atomic(manifest.root / (manifest.split + ".csv"), csv);
}

namespace {

std::vector<std::size_t> parse_ids(const std::string& field, std::size_t offset) {
  std::vector<std::size_t> ids;
  std::stringstream ss(field);
  std::string tok;
  while (std::getline(ss, tok, ';')) {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw ParseError("malformed id list '" + field + "'", offset);
    ids.push_back(std::stoul(tok));
  }
  if (ids.empty()) throw ParseError("empty id list", offset);
  return ids;
}

DatasetSpec spec_from_config(const KeyValueConfig& cfg) {
  DatasetSpec s;
  s.num_classes = cfg.get_uint("num_classes", s.num_classes);
  s.num_backgrounds = cfg.get_uint("num_backgrounds", s.num_backgrounds);
  s.bias_ratio = cfg.get_double("bias_ratio", s.bias_ratio);
  s.image_size = cfg.get_uint("image_size", s.image_size);
  s.train_samples = cfg.get_uint("train_samples", s.train_samples);
  s.val_samples = cfg.get_uint("val_samples", s.val_samples);
  s.max_objects_per_image = cfg.get_uint("max_objects_per_image", s.max_objects_per_image);
  s.seed = cfg.get_uint("data_seed", s.seed);
  return s;
}

}  // namespace

std::string dataset_spec_echo(const DatasetSpec& spec) {
  std::ostringstream os;
  os.precision(17);
  os << "num_classes = " << spec.num_classes << "\n"
     << "num_backgrounds = " << spec.num_backgrounds << "\n"
     << "bias_ratio = " << spec.bias_ratio << "\n"
     << "image_size = " << spec.image_size << "\n"
     << "train_samples = " << spec.train_samples << "\n"
     << "val_samples = " << spec.val_samples << "\n"
     << "max_objects_per_image = " << spec.max_objects_per_image << "\n"
     << "data_seed = " << spec.seed << "\n";
  return os.str();
}

Manifest read_manifest(const fs::path& root, const std::string& split) {
  Manifest m;
  m.split = split;
  m.root = root;
  const bool has_echo = fs::exists(root / "dataset.cfg");
  if (has_echo) m.spec = spec_from_config(KeyValueConfig::load(root / "dataset.cfg"));

  const auto bytes = read_file_bytes(root / (split + ".csv"));
  const std::string text(bytes.begin(), bytes.end());
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string line = text.substr(pos, end - pos);
    const std::size_t line_start = pos;
    pos = end + 1;
    if (line_no++ == 0) {
      if (line != "image,mask,label,background_id,bias_aligned")
        throw ParseError("unexpected manifest header '" + line + "'", line_start);
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 5) throw ParseError("manifest row needs 5 fields", line_start);
    ManifestRow row;
    row.image = fields[0];
    row.mask = fields[1];
    row.label = parse_ids(fields[2], line_start);
    row.backgrounds = parse_ids(fields[3], line_start);
    if (row.backgrounds.size() != row.label.size())
      throw ParseError("background_id list must parallel the label list", line_start);
    if (fields[4] != "0" && fields[4] != "1") throw ParseError("bias_aligned must be 0 or 1", line_start);
    row.bias_aligned = fields[4] == "1";
    m.rows.push_back(std::move(row));
  }
  if (line_no == 0) throw ParseError("empty manifest", 0);
  if (has_echo) {
    const std::size_t expect = split == "train" ? m.spec.train_samples : m.spec.val_samples;
    if ((split == "train" || split == "val") && m.rows.size() != expect)
      throw IntegrityError("manifest " + split + " has " + std::to_string(m.rows.size()) + " rows, expected " +
                           std::to_string(expect));
  }
  return m;
}

SampleRecord load_sample(const Manifest& manifest, const ManifestRow& row) {
  const auto img = read_pnm(manifest.root / row.image);
  const auto mask = read_pnm(manifest.root / row.mask);
  if (img.channels != 3) throw IntegrityError(row.image + ": expected an RGB (P6) image");
  if (mask.channels != 1) throw IntegrityError(row.mask + ": expected a grayscale (P5) mask");
  if (mask.width != img.width || mask.height != img.height)
    throw IntegrityError(row.mask + ": mask size differs from image size");
  const std::size_t k = manifest.spec.num_classes;

  SampleRecord rec;
  rec.width = img.width;
  rec.height = img.height;
  const std::size_t plane = img.width * img.height;
  rec.image.resize(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) rec.image[c * plane + p] = img.pixels[p * 3 + c] / 255.0;
  rec.label.assign(k, 0.0);
  for (auto v : mask.pixels) {
    if (v > k) throw IntegrityError(row.mask + ": mask value " + std::to_string(v) + " exceeds class count " + std::to_string(k));
    if (v > 0) rec.label[v - 1] = 1.0;
  }
  if (rec.classes() != row.label)
    throw IntegrityError(row.mask + ": classes in mask (" + join_ids(rec.classes()) + ") differ from manifest label (" +
                         join_ids(row.label) + ")");
  rec.object_mask = mask.pixels;
  rec.object_backgrounds = row.backgrounds;
  rec.background_id = row.background_id();
  rec.bias_aligned = row.bias_aligned;
  return rec;
}

BiasSplit split_bias(const std::vector<ManifestRow>& rows) {
  BiasSplit out;
  for (const auto& r : rows) (r.bias_aligned ? out.aligned : out.conflicting).push_back(r);
  return out;
}

CoOccurrence co_occurrence(const std::vector<ManifestRow>& rows, std::size_t num_classes,
                           std::size_t num_backgrounds) {
  CoOccurrence co{num_classes, num_backgrounds, std::vector<double>(num_classes * num_backgrounds, 0.0),
                  std::vector<bool>(num_classes, false)};
  std::vector<double> totals(num_classes, 0.0);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.label.size(); ++i) {
      if (r.label[i] >= num_classes || r.backgrounds[i] >= num_backgrounds)
        throw IntegrityError("co_occurrence: class or background id out of range");
      co.ratios[r.label[i] * num_backgrounds + r.backgrounds[i]] += 1.0;
      totals[r.label[i]] += 1.0;
    }
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (totals[k] == 0.0) {
      co.empty_class[k] = true;
      continue;
    }
    for (std::size_t b = 0; b < num_backgrounds; ++b) co.ratios[k * num_backgrounds + b] /= totals[k];
  }
  return co;
}

std::string dataset_hash(const Manifest& manifest) {
  Fnv1a h;
  h.update(read_file_bytes(manifest.root / (manifest.split + ".csv")));
  for (const auto& r : manifest.rows) {
    h.update(read_file_bytes(manifest.root / r.image));
    h.update(read_file_bytes(manifest.root / r.mask));
  }
  return h.hex();
}

}  // namespace sma

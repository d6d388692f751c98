#include "sma/localization.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sma/errors.hpp"

namespace sma {

std::vector<double> bilinear_upsample(std::span<const double> plane, std::size_t h, std::size_t w,
                                      std::size_t out_h, std::size_t out_w) {
  if (plane.size() != h * w) throw ContractViolation("bilinear_upsample: plane size mismatch");
  std::vector<double> out(out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = (1 - tx) * plane[y0 * w + x0] + tx * plane[y0 * w + x1];
      const double bottom = (1 - tx) * plane[y1 * w + x0] + tx * plane[y1 * w + x1];
      out[y * out_w + x] = (1 - ty) * top + ty * bottom;
    }
  }
  return out;
}

LocalizationMap cam(const Model& model, std::span<const double> image, std::size_t height, std::size_t width,
                    std::optional<std::vector<std::size_t>> classes) {
  if (image.size() != 3 * height * width) throw ContractViolation("cam: image must be 3×H×W");
  Tensor x = Tensor::from({1, 3, height, width}, {image.begin(), image.end()});
  const Tensor deep = model.backbone_forward(x).deep;
  const std::size_t c = deep.dim(1), h = deep.dim(2), w = deep.dim(3), hw = h * w;
  const std::size_t k = model.config().num_classes;
  const auto weights = model.param("head_f.weight").tensor.values();  // K×C
  const auto feats = deep.values();

  LocalizationMap loc{k, h, w, height, width, std::vector<double>(k * hw, 0.0), {}};
  std::vector<bool> active(k, !classes.has_value());
  if (classes)
    for (auto cls : *classes) active.at(cls) = true;
  for (std::size_t cls = 0; cls < k; ++cls) {
    if (!active[cls]) continue;
    double* map = loc.scores.data() + cls * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double wgt = weights[cls * c + ch];
      for (std::size_t p = 0; p < hw; ++p) map[p] += wgt * feats[ch * hw + p];
    }
    double peak = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      map[p] = std::max(map[p], 0.0);
      peak = std::max(peak, map[p]);
    }
    if (peak > 0.0)
      for (std::size_t p = 0; p < hw; ++p) map[p] /= peak;
  }
  loc.upsampled.reserve(k * height * width);
  for (std::size_t cls = 0; cls < k; ++cls) {
    auto up = bilinear_upsample(std::span(loc.scores).subspan(cls * hw, hw), h, w, height, width);
    loc.upsampled.insert(loc.upsampled.end(), up.begin(), up.end());
  }
  return loc;
}

std::vector<std::uint8_t> threshold_mask(const LocalizationMap& loc, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ContractViolation("threshold_mask: tau must lie in (0, 1)");
  const std::size_t plane = loc.height * loc.width;
  std::vector<std::uint8_t> out(plane, 0);
  for (std::size_t p = 0; p < plane; ++p) {
    double best = tau;
    for (std::size_t cls = 0; cls < loc.num_classes; ++cls) {
      const double s = loc.upsampled[cls * plane + p];
      if (s > best) {
        best = s;
        out[p] = static_cast<std::uint8_t>(cls + 1);
      }
    }
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : num_labels(num_classes + 1), counts(num_labels * num_labels, 0) {}

void ConfusionMatrix::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw ContractViolation("miou: prediction and ground truth differ in size");
  for (std::size_t p = 0; p < pred.size(); ++p) {
    if (pred[p] >= num_labels || gt[p] >= num_labels)
      throw ContractViolation("miou: label " + std::to_string(std::max(pred[p], gt[p])) + " outside 0.." +
                              std::to_string(num_labels - 1));
    ++counts[gt[p] * num_labels + pred[p]];
  }
}

SegEvalResult evaluate_confusion(const ConfusionMatrix& confusion) {
  SegEvalResult r{std::vector<std::optional<double>>(confusion.num_labels), 0.0, confusion};
  const std::size_t n = confusion.num_labels;
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t tp = confusion.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < n; ++o) {
      if (o == c) continue;
      fp += confusion.at(o, c);
      fn += confusion.at(c, o);
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    total += *r.iou[c];
    ++present;
  }
  r.miou = present ? total / static_cast<double>(present) : 0.0;
  return r;
}

SegEvalResult miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::size_t num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, gt);
  return evaluate_confusion(cm);
}

std::string seg_summary_csv(const SegEvalResult& result) {
  std::ostringstream os;
  os.precision(17);
  os << "class,iou\n";
  for (std::size_t c = 0; c < result.iou.size(); ++c) {
    os << c << ',';
    if (result.iou[c]) os << *result.iou[c];
    os << '\n';
  }
  os << "miou," << result.miou << '\n';
  return os.str();
}

}  // namespace sma

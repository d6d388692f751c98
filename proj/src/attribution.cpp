#include "sma/attribution.hpp"

#include <algorithm>
#include <atomic>
#include <optional>
#include <cmath>
#include <sstream>
#include <thread>

#include "sma/errors.hpp"

namespace sma {

namespace {

std::vector<double> per_sample_outputs(const Tensor& out, std::size_t n) {
  if (out.numel() != n)
    throw ContractViolation("attribution target must yield one value per sample, got " + to_string(out.shape()));
  return {out.values().begin(), out.values().end()};
}

Shape batched(const Shape& image_shape, std::size_t n) {
  Shape s{n};
  s.insert(s.end(), image_shape.begin(), image_shape.end());
  return s;
}

BatchFunction logit_function(const Model& model, std::size_t target) {
  if (target >= model.config().num_classes) throw ContractViolation("target class " + std::to_string(target) + " out of range");
  return [&model, target](const Tensor& batch) {
    Tensor logits = model.object_logits(batch);  // N×K
    const std::size_t pick[1] = {target};
    return reshape(gather_rows(transpose(logits), pick), {logits.dim(0)});
  };
}

const Model& ensure_frozen(const Model& model, std::optional<Model>& holder) {
  for (const auto& p : model.parameters()) {
    if (p.tensor.requires_grad()) {
      holder.emplace(frozen_copy(model));
      return *holder;
    }
  }
  return model;
}

}  // namespace

Model frozen_copy(const Model& model) {
  Model copy(model.config(), 0);
  for (std::size_t i = 0; i < copy.parameters().size(); ++i) {
    const auto src = model.parameters()[i].tensor.values();
    std::copy(src.begin(), src.end(), copy.parameters()[i].tensor.mutable_values().begin());
  }
  copy.set_trainable(false);
  return copy;
}

std::vector<double> integrated_gradients(const BatchFunction& f, const Shape& image_shape,
                                         std::span<const double> input, std::span<const double> baseline,
                                         std::size_t steps, std::size_t chunk) {
  if (steps < 1) throw ContractViolation("integrated_gradients: steps must be >= 1");
  const std::size_t per = numel(image_shape);
  if (input.size() != per || baseline.size() != per)
    throw ContractViolation("integrated_gradients: input/baseline size does not match " + to_string(image_shape));
  chunk = std::max<std::size_t>(1, std::min(chunk, steps));

  std::vector<double> grad_sum(per, 0.0);
  for (std::size_t first = 1; first <= steps; first += chunk) {
    const std::size_t n = std::min(chunk, steps - first + 1);
    std::vector<double> points(n * per);
    for (std::size_t j = 0; j < n; ++j) {
      const double alpha = static_cast<double>(first + j) / static_cast<double>(steps);
      for (std::size_t e = 0; e < per; ++e) points[j * per + e] = baseline[e] + alpha * (input[e] - baseline[e]);
    }
    Tensor x = Tensor::from(batched(image_shape, n), std::move(points), true);
    Tensor out = f(x);
    per_sample_outputs(out, n);
    Tensor total = sum(out);
    total.backward();
    if (!x.has_grad()) continue;  // output independent of the input
    const auto g = x.grad();
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t e = 0; e < per; ++e) grad_sum[e] += g[j * per + e];
  }
  std::vector<double> attributions(per);
  for (std::size_t e = 0; e < per; ++e)
    attributions[e] = (input[e] - baseline[e]) * grad_sum[e] / static_cast<double>(steps);
  return attributions;
}

double evaluate(const BatchFunction& f, const Shape& image_shape, std::span<const double> input) {
  Tensor x = Tensor::from(batched(image_shape, 1), {input.begin(), input.end()});
  return per_sample_outputs(f(x), 1)[0];
}

IgMap integrated_gradients(const Model& model, const SampleRecord& sample, const AttributionConfig& cfg) {
  std::optional<Model> holder;
  const Model& frozen = ensure_frozen(model, holder);
  const Shape shape{sample.channels, sample.height, sample.width};
  std::vector<double> base(sample.image.size(), cfg.baseline_value);
  IgMap out;
  out.height = sample.height;
  out.width = sample.width;
  out.per_element = integrated_gradients(logit_function(frozen, cfg.target_class), shape, sample.image, base,
                                         cfg.steps, cfg.chunk);
  const std::size_t plane = sample.height * sample.width;
  out.map.assign(plane, 0.0);
  for (std::size_t c = 0; c < sample.channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) out.map[p] += out.per_element[c * plane + p];
  return out;
}

double target_logit(const Model& model, const SampleRecord& sample, std::size_t target_class) {
  std::optional<Model> holder;
  const Model& frozen = ensure_frozen(model, holder);
  const Shape shape{sample.channels, sample.height, sample.width};
  return evaluate(logit_function(frozen, target_class), shape, sample.image);
}

double baseline_logit(const Model& model, const SampleRecord& sample, std::size_t target_class,
                      double baseline_value) {
  std::optional<Model> holder;
  const Model& frozen = ensure_frozen(model, holder);
  const Shape shape{sample.channels, sample.height, sample.width};
  std::vector<double> base(sample.image.size(), baseline_value);
  return evaluate(logit_function(frozen, target_class), shape, base);
}

double completeness_gap(std::span<const double> attributions, double f_input, double f_baseline) {
  double total = 0.0;
  for (double a : attributions) total += a;
  return std::abs(total - (f_input - f_baseline));
}

RegionMask region_mask(const SampleRecord& sample, std::size_t target_class) {
  RegionMask m;
  const auto id = static_cast<std::uint8_t>(target_class + 1);
  m.object.resize(sample.object_mask.size());
  m.background.resize(sample.object_mask.size());
  for (std::size_t p = 0; p < sample.object_mask.size(); ++p) {
    m.object[p] = sample.object_mask[p] == id;
    m.background[p] = sample.object_mask[p] == 0;
  }
  return m;
}

namespace {

std::pair<double, double> positive_masses(std::span<const double> ig_map, const RegionMask& mask) {
  if (mask.object.size() != ig_map.size() || mask.background.size() != ig_map.size())
    throw ContractViolation("region mask does not match the attribution map");
  double obj = 0.0, bg = 0.0;
  bool any_obj = false, any_bg = false;
  for (std::size_t p = 0; p < ig_map.size(); ++p) {
    const double v = std::max(ig_map[p], 0.0);
    if (mask.object[p]) {
      obj += v;
      any_obj = true;
    } else if (mask.background[p]) {
      bg += v;
      any_bg = true;
    }
  }
  if (!any_obj || !any_bg) throw ContractViolation("SUR/BAR need non-empty object and background regions");
  return {obj, bg};
}

}  // namespace

RatioValue sur(std::span<const double> ig_map, const RegionMask& mask) {
  const auto [obj, bg] = positive_masses(ig_map, mask);
  RatioValue r;
  r.flagged = bg < kSurFloor;
  r.value = std::min(obj / std::max(bg, kSurFloor), kSurCap);
  return r;
}

RatioValue bar(std::span<const double> ig_map, const RegionMask& mask) {
  const auto [obj, bg] = positive_masses(ig_map, mask);
  if (!(obj + bg > 0.0)) return {0.0, true};
  return {bg / (obj + bg), false};
}

AttributionResult attribute(const Model& model, const SampleRecord& sample, std::size_t sample_index,
                            const AttributionConfig& cfg) {
  std::optional<Model> holder;
  const Model& frozen = ensure_frozen(model, holder);
  AttributionResult r;
  r.sample = sample_index;
  r.target_class = cfg.target_class;
  r.ig = integrated_gradients(frozen, sample, cfg);
  const auto mask = region_mask(sample, cfg.target_class);
  const auto s = sur(r.ig.map, mask);
  const auto b = bar(r.ig.map, mask);
  r.sur = s.value;
  r.sur_flagged = s.flagged;
  r.bar = b.value;
  r.bar_flagged = b.flagged;
  const double fx = target_logit(frozen, sample, cfg.target_class);
  const double fb = baseline_logit(frozen, sample, cfg.target_class, cfg.baseline_value);
  r.completeness_gap = completeness_gap(r.ig.per_element, fx, fb);
  const double delta = std::abs(fx - fb);
  r.relative_gap = delta > 0.0 ? r.completeness_gap / delta : (r.completeness_gap > 0.0 ? INFINITY : 0.0);
  return r;
}

PairAnalysis pair_analysis(const Model& model, const std::vector<SampleRecord>& samples, std::size_t num_classes,
                           const PairAnalysisConfig& cfg) {
  struct Job {
    std::size_t sample, cls;
    bool aligned;
  };
  std::vector<Job> jobs;
  for (std::size_t k = 0; k < num_classes; ++k) {
    for (bool aligned : {true, false}) {
      std::size_t taken = 0;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].bias_aligned != aligned || samples[i].label.at(k) < 0.5) continue;
        if (cfg.max_per_class && taken >= cfg.max_per_class) break;
        jobs.push_back({i, k, aligned});
        ++taken;
      }
    }
  }

  std::vector<AttributionResult> results(jobs.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.threads, jobs.size()));
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    const Model local = frozen_copy(model);
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      AttributionConfig ac = cfg.attribution;
      ac.target_class = jobs[j].cls;
      results[j] = attribute(local, samples[jobs[j].sample], jobs[j].sample, ac);
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  PairAnalysis out;
  for (std::size_t k = 0; k < num_classes; ++k) {
    for (bool aligned : {true, false}) {
      PairRow row;
      row.cls = k;
      row.split = aligned ? "aligned" : "conflicting";
      for (std::size_t j = 0; j < jobs.size(); ++j) {
        if (jobs[j].cls != k || jobs[j].aligned != aligned) continue;
        ++row.n;
        row.mean_sur += results[j].sur;
        row.mean_bar += results[j].bar;
        row.mean_completeness_gap += results[j].completeness_gap;
        row.flagged += (results[j].sur_flagged || results[j].bar_flagged) ? 1 : 0;
      }
      if (row.n == 0) {
        out.warnings.push_back("class " + std::to_string(k) + " has no " + row.split + " samples; skipped");
        continue;
      }
      const auto n = static_cast<double>(row.n);
      row.mean_sur /= n;
      row.mean_bar /= n;
      row.mean_completeness_gap /= n;
      out.rows.push_back(row);
    }
  }
  out.results = std::move(results);
  return out;
}

std::string pair_table_csv(const std::vector<PairRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "class,split,n,mean_sur,mean_bar,mean_completeness_gap\n";
  for (const auto& r : rows)
    os << r.cls << ',' << r.split << ',' << r.n << ',' << r.mean_sur << ',' << r.mean_bar << ','
       << r.mean_completeness_gap << '\n';
  return os.str();
}

Image8 heatmap_pgm(const IgMap& ig) {
  double max_abs = 0.0;
  for (double v : ig.map) max_abs = std::max(max_abs, std::abs(v));
  Image8 img{ig.width, ig.height, 1, std::vector<std::uint8_t>(ig.map.size(), 128)};
  if (max_abs == 0.0) return img;
  for (std::size_t p = 0; p < ig.map.size(); ++p) {
    const double v = 128.0 + 127.0 * ig.map[p] / max_abs;
    img.pixels[p] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return img;
}

}  // namespace sma

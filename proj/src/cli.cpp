#include "sma/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <set>
#include <ostream>
#include <sstream>

#include "sma/attribution.hpp"
#include "sma/errors.hpp"
#include "sma/experiment.hpp"
#include "sma/image_io.hpp"

namespace sma {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string read_text(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

// Manifest paths name a split CSV; its directory is the dataset root.
Manifest open_manifest(const fs::path& csv) {
  if (csv.extension() != ".csv") throw ConfigError("--manifest must name a split CSV, got " + csv.string());
  if (!fs::exists(csv)) throw IoError("manifest not found: " + csv.string());
  return read_manifest(csv.parent_path().empty() ? fs::path(".") : csv.parent_path(), csv.stem().string());
}

Model open_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
  return load_checkpoint(path);
}

// Analysis settings come from --config, else the run's saved config, else defaults.
ExperimentConfig config_for_checkpoint(const std::string& config_path, const fs::path& checkpoint) {
  if (!config_path.empty()) return load_experiment_config(config_path);
  const auto saved = checkpoint.parent_path() / "config.cfg";
  if (fs::exists(saved)) return load_experiment_config(saved);
  return ExperimentConfig{};
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Options {
  std::string config, out, checkpoint, manifest, run_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau;
  std::size_t threads = 1;
};

// Keys that define what a run is; a silent default would make sweeps collide.
const std::set<std::string> kGenRequired{"data_dir", "data_seed"};
const std::set<std::string> kTrainRequired{"data_dir", "seed", "shuffle_mode"};

int cmd_gen(const Options& o, std::ostream& out) {
  if (o.config.empty()) throw ConfigError("gen requires --config");
  auto kv = KeyValueConfig::load(o.config);
  if (o.seed) kv.set("data_seed", std::to_string(*o.seed));
  kv.require(kGenRequired);
  const auto cfg = experiment_config(kv);
  const fs::path dir = o.out.empty() ? cfg.data_dir : fs::path(o.out);
  Stopwatch sw;
  const auto manifests = generate_dataset(cfg.data, dir);
  for (const auto& m : manifests)
    out << m.split << ": " << m.rows.size() << " images, hash " << dataset_hash(m) << "\n";
  out << "dataset written to " << dir.string() << " in " << sw.seconds() << " s\n";
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  if (o.config.empty()) throw ConfigError("train requires --config");
  auto kv = KeyValueConfig::load(o.config);
  if (o.seed) kv.set("seed", std::to_string(*o.seed));
  kv.require(kTrainRequired);
  const auto cfg = experiment_config(kv);
  const fs::path root = o.out.empty() ? fs::path("runs") : fs::path(o.out);
  const fs::path dir = root / run_name(cfg);
  ensure_dir(dir);

  Stopwatch load_sw;
  const auto manifest = read_manifest(cfg.data_dir, "train");
  if (manifest.spec.num_classes != cfg.data.num_classes)
    throw ConfigError("dataset at " + cfg.data_dir.string() + " has " + std::to_string(manifest.spec.num_classes) +
                      " classes, config says " + std::to_string(cfg.data.num_classes));
  const auto data = load_split(manifest);
  const double load_s = load_sw.seconds();

  Stopwatch train_sw;
  Model model(cfg.model, cfg.train.seed);
  const auto log = train(cfg.train, data, model, [&](const EpochMetrics& m) {
    out << "[" << static_cast<long>(train_sw.seconds()) << "s] epoch " << m.epoch << " lr " << m.lr << " cls " << m.loss_cls << " contr " << m.loss_contr << " shuffle "
        << m.loss_shuffle << " acc " << m.train_acc << "\n";
    out.flush();
  });
  const double train_s = train_sw.seconds();

  write_file_atomic(dir / "config.cfg", config_echo(cfg));
  write_metrics_csv(dir / "metrics.csv", log);
  save_checkpoint(model, dir / "checkpoint.smac");

  RunManifest rm;
  rm.arm = cfg.arm;
  rm.config = config_echo(cfg);
  rm.dataset_hash = dataset_hash(manifest);
  rm.checkpoint = (dir / "checkpoint.smac").string();
  rm.output_dir = dir.string();
  rm.timings = {{"load", load_s}, {"train", train_s}};
  rm.outputs = {"config.cfg", "metrics.csv", "checkpoint.smac"};
  write_run_manifest(dir, rm);
  out << "run written to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_analyze(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty() || o.manifest.empty()) throw ConfigError("analyze requires --checkpoint and --manifest");
  const fs::path ckpt = o.checkpoint;
  const auto cfg = config_for_checkpoint(o.config, ckpt);
  const Model model = open_checkpoint(ckpt);
  const auto manifest = open_manifest(o.manifest);
  const auto data = load_split(manifest);
  const fs::path dir = o.out.empty() ? ckpt.parent_path() : fs::path(o.out);
  ensure_dir(dir / "heatmaps");

  Stopwatch sw;
  PairAnalysisConfig pc;
  pc.attribution.steps = cfg.ig_steps;
  pc.attribution.chunk = cfg.ig_chunk;
  pc.max_per_class = cfg.analysis_max_per_class;
  pc.threads = std::max<std::size_t>(1, o.threads);
  const auto analysis = pair_analysis(model, data.samples, data.num_classes, pc);
  for (const auto& w : analysis.warnings) out << "warning: " << w << "\n";

  RunManifest rm;
  rm.output_dir = dir.string();
  rm.checkpoint = ckpt.string();
  rm.dataset_hash = dataset_hash(manifest);
  std::vector<PairRow> aligned, conflicting;
  for (const auto& r : analysis.rows) (r.split == "aligned" ? aligned : conflicting).push_back(r);
  write_file_atomic(dir / "sur_bar.csv", pair_table_csv(analysis.rows));
  write_file_atomic(dir / "sur_bar_aligned.csv", pair_table_csv(aligned));
  write_file_atomic(dir / "sur_bar_conflicting.csv", pair_table_csv(conflicting));
  rm.outputs = {"sur_bar.csv", "sur_bar_aligned.csv", "sur_bar_conflicting.csv", "attributions.csv"};

  std::ostringstream per;
  per.precision(17);
  per << "image,class,split,sur,bar,completeness_gap,relative_gap,flagged\n";
  for (const auto& r : analysis.results) {
    const auto& row = manifest.rows.at(r.sample);
    const std::string heat = "heatmaps/" + fs::path(row.image).stem().string() + "_c" +
                             std::to_string(r.target_class) + ".pgm";
    write_pnm(dir / heat, heatmap_pgm(r.ig));
    rm.outputs.push_back(heat);
    per << row.image << ',' << r.target_class << ',' << (row.bias_aligned ? "aligned" : "conflicting") << ','
        << r.sur << ',' << r.bar << ',' << r.completeness_gap << ',' << r.relative_gap << ','
        << ((r.sur_flagged || r.bar_flagged) ? 1 : 0) << '\n';
  }
  write_file_atomic(dir / "attributions.csv", per.str());
  rm.timings = {{"analyze", sw.seconds()}};
  write_run_manifest(dir, rm);

  const auto a = split_means(analysis.rows, "aligned");
  const auto c = split_means(analysis.rows, "conflicting");
  out << "aligned: mean SUR " << a.mean_sur << ", mean BAR " << a.mean_bar << "\n"
      << "conflicting: mean SUR " << c.mean_sur << ", mean BAR " << c.mean_bar << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty() || o.manifest.empty()) throw ConfigError("eval requires --checkpoint and --manifest");
  const fs::path ckpt = o.checkpoint;
  const auto cfg = config_for_checkpoint(o.config, ckpt);
  const double tau = o.tau.value_or(cfg.tau);
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1), got " + fmt(tau));
  const Model model = open_checkpoint(ckpt);
  const auto manifest = open_manifest(o.manifest);
  const auto data = load_split(manifest);
  const fs::path dir = o.out.empty() ? ckpt.parent_path() : fs::path(o.out);
  ensure_dir(dir / "masks");

  Stopwatch sw;
  const auto report = evaluate_localization(model, data.samples, data.num_classes, tau, true);
  RunManifest rm;
  rm.output_dir = dir.string();
  rm.checkpoint = ckpt.string();
  rm.dataset_hash = dataset_hash(manifest);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& row = manifest.rows[i];
    names.push_back(row.image);
    const std::string mask = "masks/" + fs::path(row.image).stem().string() + "_pred.pgm";
    write_pnm(dir / mask, Image8{data.width, data.height, 1, report.masks[i]});
    rm.outputs.push_back(mask);
  }
  write_file_atomic(dir / "eval_summary.csv", seg_summary_csv(report.all));
  write_file_atomic(dir / "eval_summary_aligned.csv", seg_summary_csv(report.aligned));
  write_file_atomic(dir / "eval_summary_conflicting.csv", seg_summary_csv(report.conflicting));
  write_file_atomic(dir / "eval_per_image.csv", per_image_iou_csv(data.samples, report, names));
  for (const char* f : {"eval_summary.csv", "eval_summary_aligned.csv", "eval_summary_conflicting.csv",
                        "eval_per_image.csv"})
    rm.outputs.emplace_back(f);
  rm.timings = {{"eval", sw.seconds()}};
  write_run_manifest(dir, rm);
  out << "mIoU " << report.all.miou << " (aligned " << report.aligned.miou << ", conflicting "
      << report.conflicting.miou << ")\n";
  return kExitOk;
}

int cmd_report(const Options& o, std::ostream& out) {
  const fs::path dir = !o.run_dir.empty() ? fs::path(o.run_dir) : (o.out.empty() ? fs::path("runs") : fs::path(o.out));
  const auto text = format_report(collect_arms(dir));
  write_file_atomic(dir / "report.txt", text);
  out << text;
  return kExitOk;
}

double median(std::vector<double> v) {
  if (v.empty()) return NAN;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

double read_miou(const fs::path& path) {
  std::istringstream is(read_text(path));
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("miou,", 0) == 0) {
      try {
        return std::stod(line.substr(5));
      } catch (const std::exception&) {
        break;
      }
    }
  }
  throw FormatError(path.string() + " has no miou row");
}

SplitAttribution read_sur_bar(const fs::path& path, const std::string& split) {
  std::istringstream is(read_text(path));
  std::string line;
  std::getline(is, line);
  if (line != "class,split,n,mean_sur,mean_bar,mean_completeness_gap")
    throw FormatError(path.string() + ": unexpected header");
  std::vector<PairRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) f.push_back(tok);
    if (f.size() != 6) throw FormatError(path.string() + ": malformed row '" + line + "'");
    PairRow r;
    r.split = f[1];
    try {
      r.mean_sur = std::stod(f[3]);
      r.mean_bar = std::stod(f[4]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed row '" + line + "'");
    }
    rows.push_back(r);
  }
  return split_means(rows, split);
}

}  // namespace

std::string RunManifest::to_json() const {
  json j;
  j["arm"] = arm;
  j["config"] = config;
  j["dataset_hash"] = dataset_hash;
  j["checkpoint"] = checkpoint;
  j["output_dir"] = output_dir;
  j["timings_seconds"] = timings;
  j["outputs"] = outputs;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text, const std::string& origin) {
  try {
    const auto j = json::parse(text);
    RunManifest m;
    m.arm = j.value("arm", "");
    m.config = j.value("config", "");
    m.dataset_hash = j.value("dataset_hash", "");
    m.checkpoint = j.value("checkpoint", "");
    m.output_dir = j.value("output_dir", "");
    if (j.contains("timings_seconds")) m.timings = j.at("timings_seconds").get<std::map<std::string, double>>();
    if (j.contains("outputs")) m.outputs = j.at("outputs").get<std::vector<std::string>>();
    return m;
  } catch (const json::parse_error& e) {
    throw ParseError(origin + ": " + e.what(), e.byte);
  } catch (const json::exception& e) {
    throw FormatError(origin + ": " + e.what());
  }
}

RunManifest read_run_manifest(const fs::path& dir) {
  const auto path = dir / "run_manifest.json";
  return RunManifest::from_json(read_text(path), path.string());
}

void write_run_manifest(const fs::path& dir, const RunManifest& update) {
  RunManifest m;
  if (fs::exists(dir / "run_manifest.json")) m = read_run_manifest(dir);
  auto take = [](std::string& dst, const std::string& src) {
    if (!src.empty()) dst = src;
  };
  take(m.arm, update.arm);
  take(m.config, update.config);
  take(m.dataset_hash, update.dataset_hash);
  take(m.checkpoint, update.checkpoint);
  take(m.output_dir, update.output_dir);
  for (const auto& [k, v] : update.timings) m.timings[k] = v;
  for (const auto& o : update.outputs)
    if (std::find(m.outputs.begin(), m.outputs.end(), o) == m.outputs.end()) m.outputs.push_back(o);
  for (const auto& o : m.outputs)
    if (!fs::exists(dir / o)) throw IntegrityError("run manifest lists missing output " + (dir / o).string());
  write_file_atomic(dir / "run_manifest.json", m.to_json());
}

std::vector<ArmSummary> collect_arms(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw IoError("run directory not found: " + run_dir.string());
  std::vector<fs::path> runs;
  if (fs::exists(run_dir / "run_manifest.json")) {
    runs.push_back(run_dir);
  } else {
    for (const auto& e : fs::directory_iterator(run_dir))
      if (e.is_directory() && fs::exists(e.path() / "run_manifest.json")) runs.push_back(e.path());
  }
  if (runs.empty()) throw IoError("no runs (run_manifest.json) under " + run_dir.string());
  std::sort(runs.begin(), runs.end());

  struct Acc {
    std::vector<double> miou, conflicting, sur, bar;
  };
  std::map<std::string, Acc> by_arm;
  std::vector<std::string> order;
  for (const auto& r : runs) {
    const auto m = read_run_manifest(r);
    for (const char* f : {"metrics.csv", "eval_summary.csv", "eval_summary_conflicting.csv", "sur_bar.csv"})
      if (!fs::exists(r / f)) throw IoError("missing metrics file " + (r / f).string());
    const std::string arm = m.arm.empty() ? r.filename().string() : m.arm;
    if (!by_arm.contains(arm)) order.push_back(arm);
    auto& a = by_arm[arm];
    a.miou.push_back(read_miou(r / "eval_summary.csv"));
    a.conflicting.push_back(read_miou(r / "eval_summary_conflicting.csv"));
    const auto s = read_sur_bar(r / "sur_bar.csv", "aligned");
    a.sur.push_back(s.mean_sur);
    a.bar.push_back(s.mean_bar);
  }
  std::vector<ArmSummary> out;
  for (const auto& name : order) {
    const auto& a = by_arm[name];
    out.push_back({name, a.miou.size(), median(a.miou), median(a.conflicting), median(a.sur), median(a.bar)});
  }
  return out;
}

std::string format_report(const std::vector<ArmSummary>& arms) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  const bool deltas = arms.size() > 1;
  std::size_t ref = 0;
  for (std::size_t i = 0; i < arms.size(); ++i)
    if (arms[i].arm == "baseline") ref = i;
  os << "arm,runs,miou,miou_conflicting,mean_sur_aligned,mean_bar_aligned";
  if (deltas) os << ",d_miou,d_miou_conflicting,d_sur,d_bar";
  os << "\n";
  for (const auto& a : arms) {
    os << a.arm << ',' << a.runs << ',' << a.miou << ',' << a.miou_conflicting << ',' << a.mean_sur << ','
       << a.mean_bar;
    if (deltas) {
      const auto& b = arms[ref];
      os << ',' << a.miou - b.miou << ',' << a.miou_conflicting - b.miou_conflicting << ',' << a.mean_sur - b.mean_sur
         << ',' << a.mean_bar - b.mean_bar;
    }
    os << "\n";
  }
  if (deltas) os << "# deltas relative to arm '" << arms[ref].arm << "'; values are medians over runs\n";
  return os.str();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shortcut mitigation experiments: gen, train, analyze, eval, report"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "experiment config file (key = value)");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--seed", o.seed, "overrides the config seed (data_seed for gen)");
  app.add_option("--threads", o.threads, "analysis worker threads")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  auto* trn = app.add_subcommand("train", "train one run");
  auto* ana = app.add_subcommand("analyze", "Integrated Gradients SUR/BAR tables and heatmaps");
  auto* evl = app.add_subcommand("eval", "CAM pseudo-mask mIoU");
  auto* rep = app.add_subcommand("report", "compare arms across runs");
  auto* tpl = app.add_subcommand("template", "print the documented config template");
  for (auto* sub : {gen, trn, ana, evl, rep, tpl}) sub->fallthrough();
  for (auto* sub : {ana, evl}) {
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint written by train")->required();
    sub->add_option("--manifest", o.manifest, "split CSV, e.g. data/val.csv")->required();
  }
  evl->add_option("--tau", o.tau, "CAM threshold in (0, 1)");
  rep->add_option("--run-dir", o.run_dir, "directory holding one or more runs");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen(o, out);
    if (trn->parsed()) return cmd_train(o, out);
    if (ana->parsed()) return cmd_analyze(o, out);
    if (evl->parsed()) return cmd_eval(o, out);
    if (rep->parsed()) return cmd_report(o, out);
    out << config_template();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitIo;
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace sma

#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace sma {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitInternal = 4;

/// Entry point for the `sma` tool. Never throws; maps failures to exit codes
/// (2 configuration, 3 I/O or format, 4 internal invariant).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Written next to every command's outputs as run_manifest.json.
struct RunManifest {
  std::string arm;
  std::string config;  // canonical echo
  std::string dataset_hash;
  std::string checkpoint;
  std::string output_dir;
  std::map<std::string, double> timings;  // phase -> seconds
  std::vector<std::string> outputs;       // paths relative to output_dir

  std::string to_json() const;
  static RunManifest from_json(const std::string& text, const std::string& origin);
};

/// Merges `update` into `<dir>/run_manifest.json` (creating it if needed).
/// Throws IntegrityError if any listed output is missing.
void write_run_manifest(const std::filesystem::path& dir, const RunManifest& update);
RunManifest read_run_manifest(const std::filesystem::path& dir);

struct ArmSummary {
  std::string arm;
  std::size_t runs = 0;
  double miou = 0, miou_conflicting = 0, mean_sur = 0, mean_bar = 0;  // seed medians
};

/// Scans `run_dir` (or its immediate subdirectories) for runs that have been
/// trained, analyzed and evaluated; throws IoError naming any missing file.
std::vector<ArmSummary> collect_arms(const std::filesystem::path& run_dir);
/// Text table; Δ columns are relative to the `baseline` arm when present,
/// otherwise the first arm, and are omitted for a single arm.
std::string format_report(const std::vector<ArmSummary>& arms);

}  // namespace sma

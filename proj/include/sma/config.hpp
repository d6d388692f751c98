#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>

namespace sma {

/// `key = value` lines with `#` comments. Keys are validated against an
/// allow-list by the caller; a key seen twice is an error.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.contains(key); }
  const std::string& raw(const std::string& key) const;
  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Throws ConfigError naming every key outside `allowed`.
  void reject_unknown(const std::set<std::string>& allowed) const;
  void require(const std::set<std::string>& keys) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }
  std::string echo() const;

 private:
  std::map<std::string, std::string> entries_;
  std::string origin_;
};

}  // namespace sma

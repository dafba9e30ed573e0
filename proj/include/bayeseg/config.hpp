#pragma once

// Flat key=value configuration with dotted namespaces:
//
//   # comment
//   hyper.phi_rho = 1e-6
//   train.steps = 2000
//
// Readers pull typed values with defaults; check_all_used() then rejects any
// key nobody asked for, so typos fail loudly instead of being ignored.

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace bayeseg {

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  // "key=value"; later assignments win.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void erase(const std::string& key) { values_.erase(key); }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated; empty items dropped.
  std::vector<std::string> get_list(const std::string& key,
                                    const std::vector<std::string>& fallback) const;
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback) const;

  // Keys under "prefix." that exist in the file.
  std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

  // Throws ConfigError naming every key that was never read.
  void check_all_used() const;

  // Sorted "key = value" lines.
  std::string to_text() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  const std::string* lookup(const std::string& key) const;

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

// Round-trip safe number formatting for config echoes.
std::string format_double(double v);
std::string format_bool(bool v);
std::string join(const std::vector<std::string>& items, const std::string& sep = ",");
std::string join_doubles(const std::vector<double>& items);

}  // namespace bayeseg

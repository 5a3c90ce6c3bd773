#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace restoredet {

/// Ordered `key = value` records. Lines starting with '#' are comments;
/// keys are unique and values are raw strings (lists are comma-separated).
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  long long get_int64(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

  /// Keys not in `known`, for rejecting typos in config files.
  std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const;

  std::string dump() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
};

std::string format_double(double value);
std::string join_ints(const std::vector<int>& values);

}  // namespace restoredet

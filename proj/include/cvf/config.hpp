#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace cvf {

// Flat `key = value` configuration. Blank lines and text after '#' are
// ignored; keys are dotted (`model.n_heads`). Every typed getter records the
// key as consumed so unknown keys can be rejected after all sections read.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated list of unsigned integers.
  std::vector<std::size_t> get_size_list(const std::string& key, const std::vector<std::size_t>& fallback) const;

  // Throws ConfigError naming every key no getter has asked for.
  void reject_unknown() const;

  std::string dump() const;
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

 private:
  const std::string* find(const std::string& key) const;

  std::string origin_ = "<string>";
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

}  // namespace cvf

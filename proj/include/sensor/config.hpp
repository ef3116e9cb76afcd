#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sensor/common.hpp"

namespace sensor {

// Flat "key = value" text. '#' starts a comment line; keys may contain dots.
// Later layers override earlier ones.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, const std::string& origin = "<text>");
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void merge(const KeyValueConfig& over);
  // For each known key, SENSOR_<KEY> (upper case, '.' and '-' -> '_') wins.
  void apply_environment(const std::vector<std::string>& keys);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::optional<std::string> get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  // Sorted "k=v\n" lines; stable input to hashing.
  std::string canonical_text() const;

 private:
  std::map<std::string, std::string> values_;
};

std::string env_name_for(const std::string& key);

}  // namespace sensor

#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "transhp/common.hpp"

namespace transhp {

// Plain-text configuration: one `key = value` per line, '#' starts a
// comment, blank lines ignored. Keys are unique; later assignments override
// earlier ones. Serialization emits keys sorted, so a round trip through
// text is stable.
class Config {
 public:
  Config() = default;

  static Config parse_text(const std::string& text);
  static Config parse_file(const std::string& path);
  std::string serialize() const;

  bool has(const std::string& key) const { return kv_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  void set_int(const std::string& key, long v) { kv_[key] = std::to_string(v); }
  void set_double(const std::string& key, double v);

  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  long get_int(const std::string& key) const;
  long get_int_or(const std::string& key, long fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;

  // Entries of other override entries of *this.
  Config merged_with(const Config& other) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace transhp

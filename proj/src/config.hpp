#pragma once

#include <map>
#include <string>
#include <vector>

namespace mvb {

// key = value configuration. '#' starts a comment; keys are dotted lowercase.
// Consumers read typed values and then call reject_unknown(), so misspelled
// keys fail loudly instead of silently using defaults.
class KvConfig {
 public:
  static KvConfig parse_file(const std::string& path);
  static KvConfig parse_string(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback);
  std::string require_string(const std::string& key);
  int64_t get_int(const std::string& key, int64_t fallback);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback);

  // Override from "key=value" strings (CLI flags win over the file).
  void set(const std::string& key, const std::string& value);

  void reject_unknown() const;  // throws ConfigError on never-read keys

  // Canonical serialization (sorted keys) used for config hashing.
  std::string canonical() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> consumed_;
};

}  // namespace mvb

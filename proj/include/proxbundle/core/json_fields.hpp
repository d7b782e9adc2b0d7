#pragma once

// Strict reading of JSON objects: typed fields, dotted paths in errors, unknown keys rejected.

#include "proxbundle/core/matrix.hpp"

#include "json.hpp"

#include <set>
#include <string>
#include <vector>

namespace proxbundle {

class JsonFields {
 public:
  JsonFields(const nlohmann::json& object, std::string path);

  bool has(const std::string& key) const { return obj_.contains(key); }

  // Each getter leaves `out` untouched when the key is absent and not required.
  void get(const std::string& key, bool& out, bool required = false);
  void get(const std::string& key, Index& out, bool required = false);
  void get(const std::string& key, int& out, bool required = false);
  void get(const std::string& key, std::uint64_t& out, bool required = false);
  void get(const std::string& key, double& out, bool required = false);
  void get(const std::string& key, std::string& out, bool required = false);
  void get(const std::string& key, std::vector<Index>& out, bool required = false);

  /// Nested object; absent keys yield an empty object unless required.
  JsonFields object(const std::string& key, bool required = false);

  /// ConfigError on the first key that was never read.
  void finish() const;

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const nlohmann::json* lookup(const std::string& key, bool required);

  static const nlohmann::json& empty_object();

  const nlohmann::json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace proxbundle

#include "proxbundle/core/json_fields.hpp"

#include <cmath>
#include <limits>

namespace proxbundle {

JsonFields::JsonFields(const nlohmann::json& object, std::string path) : obj_(object), path_(std::move(path)) {
  if (!obj_.is_object()) throw ConfigError((path_.empty() ? std::string("document") : path_) + ": expected an object");
}

const nlohmann::json& JsonFields::empty_object() {
  static const nlohmann::json empty = nlohmann::json::object();
  return empty;
}

const nlohmann::json* JsonFields::lookup(const std::string& key, bool required) {
  seen_.insert(key);
  const auto it = obj_.find(key);
  if (it == obj_.end()) {
    if (required) throw ConfigError(field(key) + ": required field missing");
    return nullptr;
  }
  return &*it;
}

void JsonFields::get(const std::string& key, bool& out, bool required) {
  if (const auto* v = lookup(key, required)) {
    if (!v->is_boolean()) throw ConfigError(field(key) + ": expected a boolean");
    out = v->get<bool>();
  }
}

void JsonFields::get(const std::string& key, Index& out, bool required) {
  if (const auto* v = lookup(key, required)) {
    if (!v->is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
    out = v->get<Index>();
  }
}

void JsonFields::get(const std::string& key, int& out, bool required) {
  Index wide = out;
  get(key, wide, required);
  if (wide < std::numeric_limits<int>::min() || wide > std::numeric_limits<int>::max()) {
    throw ConfigError(field(key) + ": out of range");
  }
  out = static_cast<int>(wide);
}

void JsonFields::get(const std::string& key, std::uint64_t& out, bool required) {
  if (const auto* v = lookup(key, required)) {
    if (!v->is_number_unsigned()) throw ConfigError(field(key) + ": expected a nonnegative integer");
    out = v->get<std::uint64_t>();
  }
}

void JsonFields::get(const std::string& key, double& out, bool required) {
  if (const auto* v = lookup(key, required)) {
    if (!v->is_number()) throw ConfigError(field(key) + ": expected a number");
    out = v->get<double>();
    if (!std::isfinite(out)) throw ConfigError(field(key) + ": must be finite");
  }
}

void JsonFields::get(const std::string& key, std::string& out, bool required) {
  if (const auto* v = lookup(key, required)) {
    if (!v->is_string()) throw ConfigError(field(key) + ": expected a string");
    out = v->get<std::string>();
  }
}

void JsonFields::get(const std::string& key, std::vector<Index>& out, bool required) {
  if (const auto* v = lookup(key, required)) {
    if (!v->is_array()) throw ConfigError(field(key) + ": expected an array of integers");
    out.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      if (!(*v)[i].is_number_integer()) {
        throw ConfigError(field(key) + "[" + std::to_string(i) + "]: expected an integer");
      }
      out.push_back((*v)[i].get<Index>());
    }
  }
}

JsonFields JsonFields::object(const std::string& key, bool required) {
  const auto* v = lookup(key, required);
  return JsonFields(v ? *v : empty_object(), field(key));
}

void JsonFields::finish() const {
  for (const auto& [key, value] : obj_.items()) {
    if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown key");
  }
}

}  // namespace proxbundle

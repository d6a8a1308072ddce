#pragma once

#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcct/core/error.hpp"

namespace pcct {

using json = nlohmann::json;

/// Reads fields out of a JSON object and rejects keys nobody asked for.
/// Call finish() after the last get() to enforce the unknown-key rule.
class StrictReader {
 public:
  StrictReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  void require(const char* key, T& out) {
    if (!j_.contains(key)) throw ConfigError(where_ + ": missing required key '" + key + "'");
    get(key, out);
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  void mark(const char* key) { seen_.insert(key); }
  const std::string& where() const { return where_; }

  void finish() const {
    std::vector<std::string> unknown;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) unknown.push_back(it.key());
    }
    if (!unknown.empty()) {
      std::string msg = where_ + ": unknown key(s):";
      for (const auto& k : unknown) msg += " " + where_ + "." + k;
      throw ConfigError(msg);
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace pcct

#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "coarl/error.hpp"

namespace coarl {

// Strict reader for one JSON object: every key must be consumed by read() or
// require() before finish(), otherwise finish() names the unknown key path.
class JsonFields {
 public:
  JsonFields(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error("config_schema", path_ + ": expected an object");
  }

  template <typename T>
  bool read(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return false;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error("config_schema", child(key) + ": wrong type (" + it->type_name() + ")");
    }
    return true;
  }

  template <typename T>
  void require(const std::string& key, T& out) {
    if (!read(key, out)) throw Error("config_schema", child(key) + ": missing required key");
  }

  const nlohmann::json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw Error("config_schema", child(key) + ": unknown key");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace coarl

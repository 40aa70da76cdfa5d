#pragma once

// Reading JSON configuration trees with key-path error messages. Every key
// a reader does not consume is reported, so typos fail loudly.

#include "segs/common.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace segs {

using Json = nlohmann::json;

inline Json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

class JsonReader {
 public:
  JsonReader(const Json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return node_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& value) {
    if (!node_.contains(key)) return;
    used_.insert(key);
    const Json& v = node_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("expected a string");
      }
      value = v.get<T>();
    } catch (const ConfigError& e) {
      throw ConfigError(key_path(key) + ": " + e.what());
    } catch (const Json::exception& e) {
      throw ConfigError(key_path(key) + ": " + e.what());
    }
  }

  JsonReader child(const std::string& key) {
    used_.insert(key);
    return JsonReader(node_.at(key), key_path(key));
  }

  const Json& raw(const std::string& key) {
    used_.insert(key);
    return node_.at(key);
  }

  /// Throws on any key that was never read.
  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it)
      if (!used_.contains(it.key())) throw ConfigError(key_path(it.key()) + ": unknown key");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(key_path(key) + ": " + what);
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  const Json& node_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace segs

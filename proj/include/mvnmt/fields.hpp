// SPDX-License-Identifier: Apache-2.0
//
// Text and JSON codecs for configuration fields. Each configuration struct
// exposes visit_fields(cfg, v); the helpers here turn that into JSON objects
// or string key/value pairs with exact round-tripping of reals.

#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mvnmt/error.hpp"
#include "mvnmt/model.hpp"
#include "mvnmt/objectives.hpp"

namespace mvnmt::fields {

inline std::string to_text(bool b) { return b ? "true" : "false"; }
inline std::string to_text(const std::string& s) { return s; }
inline std::string to_text(NormStyle s) { return to_string(s); }
inline std::string to_text(View v) { return to_string(v); }
inline std::string to_text(const DarkMode& m) { return m.str(); }
template <typename T>
  requires std::is_arithmetic_v<T>
std::string to_text(T x) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, x);  // shortest round-trip form
  return std::string(buf, r.ptr);
}

inline void from_text(const std::string& s, bool& b) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") {
    b = true;
  } else if (s == "false" || s == "0" || s == "no" || s == "off") {
    b = false;
  } else {
    throw ConfigError("expected a boolean, got '" + s + "'");
  }
}
inline void from_text(const std::string& s, std::string& out) { out = s; }
inline void from_text(const std::string& s, NormStyle& out) { out = parse_norm_style(s); }
inline void from_text(const std::string& s, View& out) { out = parse_view(s); }
inline void from_text(const std::string& s, DarkMode& out) { out = DarkMode::parse(s); }
template <typename T>
  requires std::is_arithmetic_v<T>
void from_text(const std::string& s, T& out) {
  T value{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), value);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ConfigError("cannot parse '" + s + "' as a number");
  }
  out = value;
}

/// Field values as strings, in visit order.
template <typename Config>
std::vector<std::pair<std::string, std::string>> to_items(Config cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  visit_fields(cfg, [&](const char* name, auto& field) { out.emplace_back(name, to_text(field)); });
  return out;
}

/// Sets one named field; returns false if the name is unknown.
template <typename Config>
bool set_item(Config& cfg, const std::string& key, const std::string& value) {
  bool found = false;
  visit_fields(cfg, [&](const char* name, auto& field) {
    if (key != name) return;
    found = true;
    try {
      from_text(value, field);
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
  });
  return found;
}

template <typename Config>
nlohmann::json to_json(Config cfg) {
  nlohmann::json j = nlohmann::json::object();
  visit_fields(cfg, [&](const char* name, auto& field) {
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_arithmetic_v<T> || std::is_same_v<T, std::string>) {
      j[name] = field;
    } else {
      j[name] = to_text(field);
    }
  });
  return j;
}

/// Strict inverse of to_json: every field must be present, nothing else.
template <typename Config>
Config from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("configuration block is not an object");
  Config cfg{};
  std::size_t seen = 0;
  visit_fields(cfg, [&](const char* name, auto& field) {
    using T = std::decay_t<decltype(field)>;
    auto it = j.find(name);
    if (it == j.end()) throw ConfigError(std::string("configuration lacks '") + name + "'");
    ++seen;
    try {
      if constexpr (std::is_arithmetic_v<T> || std::is_same_v<T, std::string>) {
        field = it->template get<T>();
      } else {
        from_text(it->template get<std::string>(), field);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("configuration field '") + name + "': " + e.what());
    }
  });
  if (seen != j.size()) throw ConfigError("configuration has unknown fields");
  return cfg;
}

}  // namespace mvnmt::fields

#pragma once

// Validates JSON against the subset of JSON Schema used in schemas/:
// type, required, properties, additionalProperties, items, enum, minimum,
// maximum, minItems, maxItems. Returns the first violation, empty if valid.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace testing {

inline bool schema_type_matches(const nlohmann::json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  if (t == "integer") return v.is_number_integer();
  if (t == "number") return v.is_number();
  return false;
}

inline std::string schema_violation(const nlohmann::json& v, const nlohmann::json& s, const std::string& at = "$") {
  if (s.contains("type")) {
    bool ok = false;
    if (s["type"].is_array()) {
      for (const auto& t : s["type"]) ok = ok || schema_type_matches(v, t.get<std::string>());
    } else {
      ok = schema_type_matches(v, s["type"].get<std::string>());
    }
    if (!ok) return at + ": expected " + s["type"].dump() + ", got " + v.type_name();
  }
  if (s.contains("enum")) {
    bool found = false;
    for (const auto& e : s["enum"]) found = found || e == v;
    if (!found) return at + ": " + v.dump() + " not in " + s["enum"].dump();
  }
  if (v.is_number()) {
    if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>()) return at + ": below minimum";
    if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>()) return at + ": above maximum";
  }
  if (v.is_object()) {
    for (const auto& r : s.value("required", nlohmann::json::array()))
      if (!v.contains(r.get<std::string>())) return at + ": missing " + r.get<std::string>();
    const auto props = s.value("properties", nlohmann::json::object());
    for (const auto& [k, child] : v.items()) {
      if (props.contains(k)) {
        if (auto e = schema_violation(child, props[k], at + "." + k); !e.empty()) return e;
      } else if (s.contains("additionalProperties")) {
        const auto& ap = s["additionalProperties"];
        if (ap.is_boolean() && !ap.get<bool>()) return at + ": unexpected key " + k;
        if (ap.is_object())
          if (auto e = schema_violation(child, ap, at + "." + k); !e.empty()) return e;
      }
    }
  }
  if (v.is_array()) {
    if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) return at + ": too few items";
    if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) return at + ": too many items";
    if (s.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i)
        if (auto e = schema_violation(v[i], s["items"], at + "[" + std::to_string(i) + "]"); !e.empty()) return e;
  }
  return {};
}

inline nlohmann::json load_schema(const std::string& name) {
  std::ifstream in(std::filesystem::path(PALOT_SCHEMA_DIR) / (name + ".json"));
  return nlohmann::json::parse(in);
}

}  // namespace testing

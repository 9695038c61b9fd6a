#pragma once
// Validator for the JSON-schema subset used by docs/bench_schema.json: type,
// required, properties, additionalProperties=false, enum, minimum.

#include <string>
#include <vector>

#include "json.hpp"

namespace cadenza::testing {

inline bool type_matches(const nlohmann::json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer();
  if (type == "number") return v.is_number();
  if (type == "null") return v.is_null();
  return false;
}

// Returns one message per violation; empty means valid.
inline std::vector<std::string> validate(const nlohmann::json& schema, const nlohmann::json& v,
                                         const std::string& at = "$") {
  std::vector<std::string> errs;
  if (auto t = schema.find("type"); t != schema.end() && !type_matches(v, *t)) {
    errs.push_back(at + ": expected " + t->get<std::string>());
    return errs;
  }
  if (auto e = schema.find("enum"); e != schema.end()) {
    bool hit = false;
    for (const auto& x : *e) hit = hit || x == v;
    if (!hit) errs.push_back(at + ": value not in enum");
  }
  if (auto m = schema.find("minimum"); m != schema.end() && v.is_number() && v.get<double>() < m->get<double>())
    errs.push_back(at + ": below minimum");
  if (v.is_object()) {
    if (auto r = schema.find("required"); r != schema.end())
      for (const auto& k : *r)
        if (!v.contains(k.get<std::string>())) errs.push_back(at + ": missing " + k.get<std::string>());
    const auto props = schema.value("properties", nlohmann::json::object());
    const bool closed = schema.contains("additionalProperties") && schema["additionalProperties"] == false;
    for (const auto& [k, x] : v.items()) {
      if (props.contains(k)) {
        for (auto& e : validate(props[k], x, at + "." + k)) errs.push_back(e);
      } else if (closed) {
        errs.push_back(at + ": unexpected property " + k);
      }
    }
  }
  return errs;
}

}  // namespace cadenza::testing

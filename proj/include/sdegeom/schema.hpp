#pragma once

// The subset of JSON Schema (2020-12) that the shipped schemas use:
// type, enum, const, properties, required, additionalProperties, items,
// min/maxItems, minLength, minimum, maximum, exclusiveMinimum/Maximum,
// allOf, if/then/else and local $ref into #/$defs. Any other keyword in a
// schema is an error rather than silently ignored, so the shipped schema
// cannot promise something this validator does not check.

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdegeom/error.hpp"

namespace sdegeom::schema {

using nlohmann::json;

struct Violation {
  std::string pointer;  // JSON pointer of the offending field, "" for the root
  std::string message;

  std::string describe() const { return (pointer.empty() ? std::string("/") : pointer) + ": " + message; }
};

namespace detail {

inline std::string escape(const std::string& key) {
  std::string out;
  for (char c : key) {
    if (c == '~') out += "~0";
    else if (c == '/') out += "~1";
    else out += c;
  }
  return out;
}

inline bool has_type(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  if (type == "number") return v.is_number();
  if (type == "integer") {
    if (v.is_number_integer()) return true;
    if (!v.is_number_float()) return false;
    const double d = v.get<double>();
    return std::isfinite(d) && std::floor(d) == d;
  }
  throw Error(Errc::ConfigError, "schema: unsupported type '" + type + "'");
}

inline std::string kind_of(const json& v) {
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  return v.type_name();
}

class Validator {
 public:
  explicit Validator(const json& root) : root_(root) {}

  void check(const json& schema, const json& v, const std::string& ptr, std::vector<Violation>& out) const {
    if (schema.is_boolean()) {
      if (!schema.get<bool>()) out.push_back({ptr, "not allowed"});
      return;
    }
    if (!schema.is_object()) throw Error(Errc::ConfigError, "schema: subschema at " + ptr + " is not an object");
    for (auto it = schema.begin(); it != schema.end(); ++it) {
      if (!known().count(it.key())) throw Error(Errc::ConfigError, "schema: unsupported keyword '" + it.key() + "'");
    }
    if (schema.contains("$ref")) check(resolve(schema["$ref"].get<std::string>()), v, ptr, out);

    if (schema.contains("type")) {
      const json& t = schema["type"];
      bool ok = false;
      if (t.is_string()) ok = has_type(v, t.get<std::string>());
      else for (const auto& one : t) ok = ok || has_type(v, one.get<std::string>());
      if (!ok) {
        out.push_back({ptr, "expected " + (t.is_string() ? t.get<std::string>() : t.dump()) + ", got " + kind_of(v)});
        return;  // the remaining keywords would only repeat the type error
      }
    }
    if (schema.contains("const") && !(v == schema["const"])) out.push_back({ptr, "must equal " + schema["const"].dump()});
    if (schema.contains("enum")) {
      bool ok = false;
      for (const auto& e : schema["enum"]) ok = ok || v == e;
      if (!ok) out.push_back({ptr, v.dump() + " is not one of " + schema["enum"].dump()});
    }
    if (v.is_number()) numeric(schema, v, ptr, out);
    if (v.is_string() && schema.contains("minLength") && v.get<std::string>().size() < schema["minLength"].get<std::size_t>()) {
      out.push_back({ptr, "shorter than " + schema["minLength"].dump() + " characters"});
    }
    if (v.is_array()) array(schema, v, ptr, out);
    if (v.is_object()) object(schema, v, ptr, out);
    if (schema.contains("allOf")) {
      for (const auto& sub : schema["allOf"]) check(sub, v, ptr, out);
    }
    if (schema.contains("if")) {
      std::vector<Violation> probe;
      check(schema["if"], v, ptr, probe);
      const char* branch = probe.empty() ? "then" : "else";
      if (schema.contains(branch)) check(schema[branch], v, ptr, out);
    }
  }

 private:
  static const std::set<std::string>& known() {
    static const std::set<std::string> k{"$schema", "$id", "$defs", "$ref", "$comment", "title", "description", "default",
                                         "examples", "type", "enum", "const", "properties", "required",
                                         "additionalProperties", "items", "minItems", "maxItems", "minLength", "minimum",
                                         "maximum", "exclusiveMinimum", "exclusiveMaximum", "allOf", "if", "then", "else"};
    return k;
  }

  const json& resolve(const std::string& ref) const {
    const std::string prefix = "#/$defs/";
    if (ref.rfind(prefix, 0) != 0) throw Error(Errc::ConfigError, "schema: only local #/$defs references are supported");
    const std::string name = ref.substr(prefix.size());
    if (!root_.contains("$defs") || !root_["$defs"].contains(name)) throw Error(Errc::ConfigError, "schema: dangling $ref " + ref);
    return root_["$defs"][name];
  }

  static void numeric(const json& s, const json& v, const std::string& ptr, std::vector<Violation>& out) {
    const double x = v.get<double>();
    const std::string shown = v.dump();
    auto bound = [&](const char* key) { return s[key].get<double>(); };
    if (s.contains("minimum") && x < bound("minimum")) out.push_back({ptr, shown + " is less than the minimum " + s["minimum"].dump()});
    if (s.contains("maximum") && x > bound("maximum")) out.push_back({ptr, shown + " is greater than the maximum " + s["maximum"].dump()});
    if (s.contains("exclusiveMinimum") && !(x > bound("exclusiveMinimum"))) {
      out.push_back({ptr, shown + " must be greater than " + s["exclusiveMinimum"].dump()});
    }
    if (s.contains("exclusiveMaximum") && !(x < bound("exclusiveMaximum"))) {
      out.push_back({ptr, shown + " must be less than " + s["exclusiveMaximum"].dump()});
    }
  }

  void array(const json& s, const json& v, const std::string& ptr, std::vector<Violation>& out) const {
    if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) {
      out.push_back({ptr, "needs at least " + s["minItems"].dump() + " items, got " + std::to_string(v.size())});
    }
    if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) {
      out.push_back({ptr, "allows at most " + s["maxItems"].dump() + " items, got " + std::to_string(v.size())});
    }
    if (s.contains("items")) {
      for (std::size_t i = 0; i < v.size(); ++i) check(s["items"], v[i], ptr + "/" + std::to_string(i), out);
    }
  }

  void object(const json& s, const json& v, const std::string& ptr, std::vector<Violation>& out) const {
    if (s.contains("required")) {
      for (const auto& key : s["required"]) {
        const auto k = key.get<std::string>();
        if (!v.contains(k)) out.push_back({ptr + "/" + escape(k), "required property is missing"});
      }
    }
    const json props = s.value("properties", json::object());
    for (auto it = v.begin(); it != v.end(); ++it) {
      const std::string child = ptr + "/" + escape(it.key());
      if (props.contains(it.key())) {
        check(props[it.key()], it.value(), child, out);
      } else if (s.contains("additionalProperties")) {
        const json& extra = s["additionalProperties"];
        if (extra.is_boolean() && !extra.get<bool>()) out.push_back({child, "unknown key"});
        else check(extra, it.value(), child, out);
      }
    }
  }

  const json& root_;
};

}  // namespace detail

/// All violations of `doc` against `schema`, in document order.
inline std::vector<Violation> validate(const json& schema, const json& doc) {
  std::vector<Violation> out;
  detail::Validator(schema).check(schema, doc, "", out);
  return out;
}

}  // namespace sdegeom::schema

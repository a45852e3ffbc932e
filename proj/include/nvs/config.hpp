#pragma once

// Dotted-key field tables for plain configuration structs: nested JSON
// in and out, and "a.b=value" overrides. Unknown keys are rejected with the
// list of valid ones.

#include <nvs/feature_volumes.hpp>

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

namespace nvs {

using FieldPtr =
    std::variant<Index*, double*, bool*, std::string*, std::uint64_t*, BackboneProfile*, std::vector<Index>*>;

class FieldTable {
 public:
  FieldTable& add(std::string key, FieldPtr field);
  /// Adds every field of another table under prefix + ".".
  FieldTable& add(const std::string& prefix, const FieldTable& nested);

  nlohmann::json to_json() const;
  /// Applies a nested object; `source` names it in error messages.
  void apply(const nlohmann::json& j, const std::string& source) const;
  /// key=value where value is parsed as JSON, falling back to a bare string.
  void apply_override(const std::string& assignment) const;
  void set(const std::string& key, const nlohmann::json& value, const std::string& source) const;

  std::vector<std::string> keys() const;

 private:
  std::vector<std::pair<std::string, FieldPtr>> fields_;
};

}  // namespace nvs

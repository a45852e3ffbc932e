#include <nvs/config.hpp>
#include <nvs/errors.hpp>

#include <algorithm>
#include <cctype>

namespace nvs {

using nlohmann::json;

FieldTable& FieldTable::add(std::string key, FieldPtr field) {
  fields_.emplace_back(std::move(key), field);
  return *this;
}

FieldTable& FieldTable::add(const std::string& prefix, const FieldTable& nested) {
  for (const auto& [key, field] : nested.fields_) fields_.emplace_back(prefix + "." + key, field);
  return *this;
}

std::vector<std::string> FieldTable::keys() const {
  std::vector<std::string> out;
  for (const auto& f : fields_) out.push_back(f.first);
  return out;
}

json FieldTable::to_json() const {
  json out = json::object();
  for (const auto& [key, field] : fields_) {
    json value = std::visit(
        [](auto* p) -> json {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, BackboneProfile>) {
            return to_string(*p);
          } else {
            return *p;
          }
        },
        field);
    out[json::json_pointer("/" + [&] {
      std::string k = key;
      for (auto& c : k)
        if (c == '.') c = '/';
      return k;
    }())] = value;
  }
  return out;
}

void FieldTable::set(const std::string& key, const json& value, const std::string& source) const {
  for (const auto& [name, field] : fields_) {
    if (name != key) continue;
    try {
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, BackboneProfile>) {
              *p = parse_backbone_profile(value.get<std::string>());
            } else if constexpr (std::is_same_v<T, double>) {
              if (!value.is_number()) throw ConfigError("expected a number");
              *p = value.get<double>();
            } else if constexpr (std::is_same_v<T, Index> || std::is_same_v<T, std::uint64_t>) {
              if (!value.is_number_integer()) throw ConfigError("expected an integer");
              *p = value.get<T>();
            } else if constexpr (std::is_same_v<T, bool>) {
              if (!value.is_boolean()) throw ConfigError("expected true or false");
              *p = value.get<bool>();
            } else if constexpr (std::is_same_v<T, std::string>) {
              if (!value.is_string()) throw ConfigError("expected a string");
              *p = value.get<std::string>();
            } else {
              *p = value.get<T>();
            }
          },
          field);
    } catch (const json::exception& e) {
      throw ConfigError(source + ": bad value for '" + key + "': " + e.what());
    } catch (const std::exception& e) {
      throw ConfigError(source + ": bad value for '" + key + "': " + e.what());
    }
    return;
  }
  std::string list;
  for (const auto& k : keys()) list += (list.empty() ? "" : ", ") + k;
  throw ConfigError(source + ": unknown key '" + key + "' (valid keys: " + list + ")");
}

void FieldTable::apply(const json& j, const std::string& source) const {
  if (!j.is_object()) throw ConfigError(source + ": configuration must be a JSON object");
  const json flat = j.flatten();
  for (const auto& [flat_key, value] : flat.items()) {
    std::string key = flat_key.substr(1);
    for (auto& c : key)
      if (c == '/') c = '.';
    // flatten() splits arrays into elements; list-valued fields take the whole array.
    const auto pos = key.find_last_of('.');
    if (pos != std::string::npos && std::all_of(key.begin() + static_cast<std::ptrdiff_t>(pos) + 1, key.end(), ::isdigit)) {
      const std::string parent = key.substr(0, pos);
      std::string pointer = "/" + parent;
      for (auto& c : pointer)
        if (c == '.') c = '/';
      if (key.substr(pos + 1) == "0") set(parent, j.at(json::json_pointer(pointer)), source);
      continue;
    }
    set(key, value, source);
  }
}

void FieldTable::apply_override(const std::string& assignment) const {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must be key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set(key, value, "override");
}

}  // namespace nvs

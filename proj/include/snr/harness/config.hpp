#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "snr/error.hpp"
#include "snr/harness/model.hpp"
#include "snr/harness/train.hpp"

namespace snr::harness {

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.model.stages) stages.push_back({{"channels", s.channels}, {"stride", s.stride}});
  return {
      {"dataset", c.dataset},
      {"domains", c.domains},
      {"target", c.target},
      {"protocol", to_string(c.protocol)},
      {"model",
       {{"stages", stages},
        {"snr_after_stage", c.model.snr_after_stage},
        {"variant", to_string(c.model.variant)},
        {"classes", c.model.classes},
        {"input_channels", c.model.input_channels},
        {"kernel", c.model.kernel},
        {"reduction", c.model.snr.reduction},
        {"eps", c.model.snr.eps},
        {"gate_bias", c.model.snr.gate_bias}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"lr", c.train.lr},
        {"momentum", c.train.momentum},
        {"lambda", c.train.lambda}}},
      {"split", {{"train_per_domain", c.train_per_domain}, {"test_per_domain", c.test_per_domain}}},
      {"seeds", c.seeds},
      {"precision", c.precision},
      {"output", c.output},
      {"checkpoints", c.checkpoints},
      {"eval_batch", c.eval_batch},
  };
}

namespace detail {

inline std::string type_name(const nlohmann::json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_unsigned()) return "unsigned integer";
  if (j.is_number_integer()) return "integer";
  if (j.is_number_float()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

// Whether `value` may replace `reference` (the default of the same key).
inline bool compatible(const nlohmann::json& reference, const nlohmann::json& value) {
  if (reference.is_number_unsigned()) return value.is_number_unsigned();
  if (reference.is_number_float()) return value.is_number();
  if (reference.is_array()) {
    if (!value.is_array()) return false;
    if (reference.empty()) return true;
    for (const auto& v : value)
      if (!compatible(reference.front(), v)) return false;
    return true;
  }
  return reference.type() == value.type();
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("config" + (prefix.empty() ? "" : " key '" + prefix + "'") + ": expected object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_into(slot, value, path);
    } else if (!compatible(slot, value)) {
      const std::string expected = slot.is_array() && !slot.empty() ? "array of " + type_name(slot.front()) : type_name(slot);
      throw ConfigError("config key '" + path + "': expected " + expected + ", got " + type_name(value));
    } else if (slot.is_number_float()) {
      slot = value.get<double>();
    } else {
      slot = value;
    }
  }
}

template <typename V>
V field(const nlohmann::json& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + path + "." + key + "' has an invalid value");
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& patch) {
  nlohmann::json j = to_json(RunConfig{});
  detail::merge_into(j, patch, "");
  RunConfig c;
  c.dataset = j["dataset"].get<std::string>();
  c.domains = j["domains"].get<std::vector<std::string>>();
  c.target = j["target"].get<std::string>();
  c.protocol = parse_protocol(j["protocol"].get<std::string>());
  const auto& m = j["model"];
  c.model.stages.clear();
  for (const auto& s : m["stages"]) {
    if (!s.is_object()) throw ConfigError("config key 'model.stages': expected array of {channels, stride}");
    for (const auto& [k, v] : s.items()) {
      if (k != "channels" && k != "stride") throw ConfigError("unknown config key 'model.stages[]." + k + "'");
    }
    c.model.stages.push_back({detail::field<std::size_t>(s, "channels", "model.stages[]"),
                              detail::field<std::size_t>(s, "stride", "model.stages[]")});
  }
  c.model.snr_after_stage = m["snr_after_stage"].get<std::vector<bool>>();
  c.model.variant = parse_variant(m["variant"].get<std::string>());
  c.model.classes = m["classes"].get<std::size_t>();
  c.model.input_channels = m["input_channels"].get<std::size_t>();
  c.model.kernel = m["kernel"].get<std::size_t>();
  c.model.snr.reduction = m["reduction"].get<std::size_t>();
  c.model.snr.eps = m["eps"].get<double>();
  c.model.snr.gate_bias = m["gate_bias"].get<bool>();
  const auto& t = j["train"];
  c.train.epochs = t["epochs"].get<std::size_t>();
  c.train.batch_size = t["batch_size"].get<std::size_t>();
  c.train.lr = t["lr"].get<double>();
  c.train.momentum = t["momentum"].get<double>();
  c.train.lambda = t["lambda"].get<double>();
  c.train_per_domain = j["split"]["train_per_domain"].get<std::size_t>();
  c.test_per_domain = j["split"]["test_per_domain"].get<std::size_t>();
  c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  c.precision = j["precision"].get<std::string>();
  c.output = j["output"].get<std::string>();
  c.checkpoints = j["checkpoints"].get<bool>();
  c.eval_batch = j["eval_batch"].get<std::size_t>();
  return c;
}

/// Parses `key.path=value`. The value is read as JSON when it parses,
/// otherwise as a bare string.
inline nlohmann::json override_patch(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json patch = value;
  std::size_t end = key.size();
  while (true) {
    const auto dot = key.rfind('.', end - 1);
    const std::string part = key.substr(dot == std::string::npos ? 0 : dot + 1, end - (dot == std::string::npos ? 0 : dot + 1));
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    patch = nlohmann::json{{part, patch}};
    if (dot == std::string::npos) break;
    end = dot;
  }
  return patch;
}

/// Defaults, then the optional file, then overrides in order.
inline RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  nlohmann::json merged = to_json(RunConfig{});
  if (!file.empty()) {
    std::ifstream is(file);
    if (!is) throw IoError("cannot read config file '" + file.string() + "'");
    nlohmann::json from_file = nlohmann::json::parse(is, nullptr, false);
    if (from_file.is_discarded()) throw ConfigError("config file '" + file.string() + "' is not valid JSON");
    detail::merge_into(merged, from_file, "");
  }
  for (const auto& o : overrides) detail::merge_into(merged, override_patch(o), "");
  RunConfig c = run_config_from_json(merged);
  c.validate();
  return c;
}

}  // namespace snr::harness

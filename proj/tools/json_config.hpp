#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <sstream>
#include <string>
#include <vector>

namespace mseg::cli {

/// CLI11 config formatter for JSON files. Nested objects address subcommands, so
/// {"train": {"epochs": 3}} sets `mseg train --epochs 3` unless the flag is given explicitly.
/// A run manifest is accepted too; its "config" object is used.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    return snapshot(app, default_also).dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    nlohmann::json j;
    try {
      input >> j;
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    // a run manifest replays its resolved options
    if (j.contains("command") && j.contains("config") && j["config"].is_object()) j = nlohmann::json(j["config"]);
    std::vector<CLI::ConfigItem> items;
    collect(j, "", {}, items);
    return items;
  }

  /// Resolved option values of `app` and its parsed subcommands.
  static nlohmann::json snapshot(const CLI::App* app, bool default_also) {
    nlohmann::json j = nlohmann::json::object();
    for (const CLI::Option* opt : app->get_options({})) {
      if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
      const std::string name = opt->get_lnames()[0];
      if (name == "config") continue;
      if (opt->get_type_size() != 0) {
        if (opt->count() == 1)
          j[name] = opt->results().at(0);
        else if (opt->count() > 1)
          j[name] = opt->results();
        else if (default_also && !opt->get_default_str().empty())
          j[name] = opt->get_default_str();
      } else if (opt->count() > 0 || default_also) {
        j[name] = opt->count() > 0;
      }
    }
    for (const CLI::App* sub : app->get_subcommands()) j[sub->get_name()] = snapshot(sub, default_also);
    return j;
  }

 private:
  static void collect(const nlohmann::json& j, const std::string& name, std::vector<std::string> parents,
                      std::vector<CLI::ConfigItem>& out) {
    if (j.is_object()) {
      if (!name.empty()) parents.push_back(name);
      for (auto it = j.begin(); it != j.end(); ++it) collect(*it, it.key(), parents, out);
      return;
    }
    CLI::ConfigItem item;
    item.name = name;
    item.parents = std::move(parents);
    if (j.is_array()) {
      for (const auto& v : j) item.inputs.push_back(scalar(v, name));
    } else {
      item.inputs = {scalar(j, name)};
    }
    out.push_back(std::move(item));
  }

  static std::string scalar(const nlohmann::json& v, const std::string& name) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw CLI::ConversionError("config key '" + name + "' must be a scalar or a list of scalars");
  }
};

}  // namespace mseg::cli

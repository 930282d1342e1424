#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "occstep/benchmark.hpp"
#include "occstep/model.hpp"
#include "occstep/rollout.hpp"

namespace occstep {

// Flat key=value configuration. '#' starts a comment; blank lines are
// ignored; keys outside the known registry are errors so typos cannot pass
// silently. Typed getters fall back to the supplied default when the key is
// absent and error on malformed values.
struct Config {
  std::map<std::string, std::string> values;

  bool has(const std::string& key) const { return values.count(key) > 0; }
  std::string get_string(const std::string& key, const std::string& dflt) const;
  std::int64_t get_int(const std::string& key, std::int64_t dflt) const;
  double get_double(const std::string& key, double dflt) const;
  bool get_bool(const std::string& key, bool dflt) const;
};

// Every key any subcommand understands (model, grid, training, scene).
const std::set<std::string>& known_config_keys();

// Parses config text; `check_keys` enforces the registry (checkpoint config
// echoes are parsed with the same code but their own key set).
Config parse_config_text(const std::string& text, bool check_keys = true);
Config load_config_file(const std::string& path);

// Builders: defaults overridden by whatever the config sets.
ModelConfig model_config_from(const Config& cfg);
SceneConfig scene_config_from(const Config& cfg);
TrainConfig train_config_from(const Config& cfg);

// Fixed-order key=value serialization of a model configuration, used as the
// checkpoint's config echo; parse with model_config_from. Two configs are
// equal exactly when their serializations are equal.
std::string model_config_to_text(const ModelConfig& cfg);

}  // namespace occstep

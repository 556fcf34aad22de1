#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "clusvpr/datagen.hpp"
#include "clusvpr/model.hpp"
#include "clusvpr/training.hpp"

namespace clusvpr {

struct EvalConfig {
  std::vector<std::size_t> ks{1, 5, 10};
  double threshold = 25.0;  // metres
};

/// Inputs of the parameter accounting table.
struct ParamsConfig {
  std::size_t channels = 1024;
  std::size_t netvlad_clusters = 128;
};

struct RunConfig {
  std::string preset = "default";
  ModelConfig model;
  TrainConfig train;
  WorldSpec world;
  EvalConfig eval;
  ParamsConfig params;

  void validate() const;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Built-in presets: "default", "desk", "tiny".
RunConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

/// JSON text with sections model, pyramid, train, world, eval, params. An
/// optional top-level "preset" selects the base values; every other key
/// overrides it. Unknown keys throw ConfigError naming the key.
RunConfig parse_config(const std::string& json_text);
/// A preset name or a path to a JSON file.
RunConfig load_config(const std::string& name_or_path);
std::string dump_config(const RunConfig& config);

}  // namespace clusvpr

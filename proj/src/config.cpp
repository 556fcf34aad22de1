#include "clusvpr/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace clusvpr {

using nlohmann::json;

namespace {

// Visits every configurable field as (section, key, reference).
template <class Config, class F>
void visit_fields(Config& c, F&& f) {
  auto& m = c.model;
  f("model", "in_channels", m.backbone.in_channels);
  f("model", "backbone_channels", m.backbone.channels);
  f("model", "backbone_strides", m.backbone.strides);
  f("model", "cwt_blocks", m.cwt_blocks);
  f("model", "local_channels", m.local_channels);
  f("model", "rate", m.rate);
  f("model", "knn", m.knn);
  f("model", "heads", m.heads);
  f("model", "lambda_c", m.lambda_c);
  f("model", "mlp_ratio", m.mlp_ratio);
  f("model", "expansion", m.expansion);
  f("model", "groups", m.groups);
  f("model", "clusters", m.clusters);
  f("model", "gem_p", m.gem_p);
  f("model", "sharpness", m.sharpness);
  f("model", "pca_dim", m.pca_dim);
  f("model", "normalize_input", m.normalize_input);

  auto& s = c.train.schedule;
  f("pyramid", "generations", s.generations);
  f("pyramid", "epochs_per_generation", s.epochs_per_generation);
  f("pyramid", "temperatures", s.temperatures);
  f("pyramid", "lambda_s", s.lambda_s);
  f("pyramid", "high_ranked_positives", s.high_ranked_positives);

  auto& t = c.train;
  f("train", "learning_rate", t.learning_rate);
  f("train", "weight_decay", t.weight_decay);
  f("train", "momentum", t.momentum);
  f("train", "batch_size", t.batch_size);
  f("train", "negatives", t.mining.negatives);
  f("train", "positive_radius", t.mining.positive_radius);
  f("train", "negative_radius", t.mining.negative_radius);
  f("train", "pool", t.mining.pool);
  f("train", "seed", t.seed);
  f("train", "kmeans_images", t.kmeans_images);

  auto& w = c.world;
  f("world", "seed", w.seed);
  f("world", "places", w.places);
  f("world", "spacing", w.spacing);
  f("world", "variants", w.variants);
  f("world", "image_size", w.image_size);
  f("world", "gain_min", w.gain_min);
  f("world", "gain_max", w.gain_max);
  f("world", "occlusions_max", w.occlusions_max);
  f("world", "occlusion_max_fraction", w.occlusion_max_fraction);
  f("world", "jitter", w.jitter);
  f("world", "shift_max", w.shift_max);
  f("world", "pixel_noise", w.pixel_noise);
  f("world", "gallery_fraction", w.gallery_fraction);
  f("world", "train_query_fraction", w.train_query_fraction);

  f("eval", "ks", c.eval.ks);
  f("eval", "threshold", c.eval.threshold);

  f("params", "channels", c.params.channels);
  f("params", "netvlad_clusters", c.params.netvlad_clusters);
}

void sync(RunConfig& c) {
  c.train.mining.high_ranked = c.train.schedule.high_ranked_positives;
  c.train.eval_threshold = c.eval.threshold;
}

}  // namespace

void RunConfig::validate() const {
  if (model.backbone.channels.empty() || model.backbone.channels.size() != model.backbone.strides.size()) {
    throw ConfigError("model.backbone_channels: must be non-empty and match model.backbone_strides");
  }
  if (model.heads == 0) throw ConfigError("model.heads: must be >= 1");
  if (model.knn == 0) throw ConfigError("model.knn: must be >= 1");
  if (model.rate == 0) throw ConfigError("model.rate: must be >= 1");
  if (model.pca_dim == 0) throw ConfigError("model.pca_dim: must be >= 1");
  if (eval.ks.empty()) throw ConfigError("eval.ks: must list at least one k");
  for (auto k : eval.ks)
    if (k == 0) throw ConfigError("eval.ks: k must be >= 1");
  try {
    model.optlad().validate();
    train.validate();
    world.validate(train.mining.positive_radius, train.mining.negative_radius);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::vector<std::string> preset_names() { return {"default", "desk", "tiny"}; }

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "default") {
  } else if (name == "desk") {
    auto& m = c.model;
    m.backbone.channels = {8, 16, 32, 32};
    m.backbone.strides = {2, 2, 1, 1};
    m.groups = 2;
    m.sharpness = 50.0;
    m.clusters = 16;
    m.pca_dim = 32;
    c.train.learning_rate = 1e-3;
    c.train.mining.negatives = 5;
    c.train.mining.pool = 15;
    c.train.schedule.high_ranked_positives = 2;
  } else if (name == "tiny") {
    auto& m = c.model;
    m.backbone.channels = {4, 8, 8, 8};
    m.backbone.strides = {2, 1, 1, 1};
    m.cwt_blocks = 2;
    m.heads = 2;
    m.knn = 3;
    m.groups = 2;
    m.clusters = 4;
    m.pca_dim = 8;
    c.world.places = 4;
    c.world.variants = 4;
    c.world.image_size = 16;
    c.world.shift_max = 2;
    c.train.mining.negatives = 2;
    c.train.schedule.high_ranked_positives = 1;
    c.train.schedule.generations = 2;
    c.train.schedule.epochs_per_generation = 1;
    c.train.kmeans_images = 4;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  sync(c);
  return c;
}

RunConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");

  std::string base = "default";
  if (doc.contains("preset")) {
    if (!doc["preset"].is_string()) throw ConfigError("preset: must be a string");
    base = doc["preset"].get<std::string>();
  }
  RunConfig c = preset_config(base);

  std::map<std::string, std::set<std::string>> known;
  visit_fields(c, [&](const char* sec, const char* key, auto&) { known[sec].insert(key); });
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (it.key() == "preset") continue;
    if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "'");
    if (!it.value().is_object()) throw ConfigError(it.key() + ": section must be an object");
    for (auto jt = it.value().begin(); jt != it.value().end(); ++jt) {
      if (!known[it.key()].count(jt.key())) throw ConfigError("unknown key '" + it.key() + "." + jt.key() + "'");
    }
  }
  visit_fields(c, [&](const char* sec, const char* key, auto& field) {
    if (!doc.contains(sec) || !doc[sec].contains(key)) return;
    const json& v = doc[sec][key];
    using T = std::decay_t<decltype(field)>;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else {
        if (!v.is_array()) throw ConfigError("");
        for (const auto& e : v)
          if (!e.is_number() || (std::is_unsigned_v<typename T::value_type> && !e.is_number_unsigned()))
            throw ConfigError("");
      }
      field = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(std::string("invalid value for '") + sec + "." + key + "'");
    }
  });
  sync(c);
  c.validate();
  return c;
}

RunConfig load_config(const std::string& name_or_path) {
  for (const auto& p : preset_names()) {
    if (p == name_or_path) {
      RunConfig c = preset_config(p);
      c.validate();
      return c;
    }
  }
  std::ifstream in(name_or_path);
  if (!in) throw ConfigError("config: '" + name_or_path + "' is neither a preset nor a readable file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const RunConfig& config) {
  json doc;
  doc["preset"] = config.preset;
  RunConfig copy = config;
  visit_fields(copy, [&](const char* sec, const char* key, auto& field) { doc[sec][key] = field; });
  return doc.dump(2) + "\n";
}

}  // namespace clusvpr

#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "protoclip/data.hpp"
#include "protoclip/encoders.hpp"
#include "protoclip/error.hpp"
#include "protoclip/inference.hpp"
#include "protoclip/training.hpp"

namespace protoclip {

/// Operator-level configuration, read from one JSON document.
///
/// Top-level keys (all optional, unknown keys rejected):
///   seed, output_dir, dataset{path}, synthetic{...}, modalities[...],
///   split{train,val,test,balanced}, encoders{image,label,tabular},
///   train{...}, eval{runs,seeds,grid_size,search}
/// Exactly one of `dataset` and `synthetic` may be given; neither means the
/// default synthetic generator.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::optional<std::string> dataset_path;
  SynthConfig synthetic;
  bool synthetic_seed_explicit = false;
  std::vector<ModalityDef> modalities = default_modality_defs();
  bool modalities_explicit = false;
  SplitFractions fractions;
  bool balanced = true;
  ModelConfig model;
  TrainConfig train;
  std::size_t eval_runs = 5;
  std::vector<std::uint64_t> eval_seeds;  // empty = seed, seed+1, ...
  std::size_t grid_size = 101;
  SearchMethod search = SearchMethod::exhaustive;

  bool uses_synthetic() const noexcept { return !dataset_path.has_value(); }

  /// Applies a new global seed everywhere it is not pinned explicitly.
  void set_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    if (!synthetic_seed_explicit) synthetic.seed = s;
  }

  std::vector<std::uint64_t> run_seeds() const {
    if (!eval_seeds.empty()) return eval_seeds;
    std::vector<std::uint64_t> out;
    for (std::size_t r = 0; r < eval_runs; ++r) out.push_back(seed + r);
    return out;
  }

  /// Modality definitions matching the data source.
  std::vector<ModalityDef> modality_defs() const {
    if (!uses_synthetic() || modalities_explicit) return modalities;
    std::vector<ModalityDef> defs;
    for (const auto& m : synthetic.modalities) {
      ModalityDef d{m.name, m.prefix, {}};
      if (m.categorical) d.categorical[m.prefix + "stage"] = {"low", "mid", "high"};
      defs.push_back(std::move(d));
    }
    return defs;
  }
};

namespace detail {

/// Walks a JSON object, remembering the field path for error messages and
/// rejecting keys nobody asked for.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }
  ConfigReader object(const std::string& key) {
    used_.insert(key);
    return ConfigReader(j_.at(key), path_ + "." + key);
  }
  const nlohmann::json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }
  std::string field(const std::string& key) const { return path_ + "." + key; }

  template <class T>
  void read(const std::string& key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
          throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(field(key) + ": expected " + expected_name<T>());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.contains(it.key())) throw ConfigError(path_ + "." + it.key() + ": unknown key");
    }
  }

 private:
  template <class T>
  static std::string expected_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_integral_v<T>) return "a non-negative integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else return "a list";
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline void read_encoder(ConfigReader r, EncoderConfig& c) {
  std::string kind = to_string(c.kind);
  r.read("kind", kind);
  c.kind = encoder_kind_from_string(kind);
  r.read("hidden_dims", c.hidden_dims);
  r.read("projection_dim", c.projection_dim);
  r.read("conv_channels", c.conv_channels);
  r.read("height", c.image.height);
  r.read("width", c.image.width);
  r.read("channels", c.image.channels);
  r.finish();
}

inline nlohmann::json encoder_json(const EncoderConfig& c) {
  nlohmann::json j{{"kind", to_string(c.kind)},
                   {"hidden_dims", c.hidden_dims},
                   {"projection_dim", c.projection_dim}};
  if (c.kind == EncoderKind::image_cnn) {
    j["conv_channels"] = c.conv_channels;
    j["height"] = c.image.height;
    j["width"] = c.image.width;
    j["channels"] = c.image.channels;
  }
  return j;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::ConfigReader;
  RunConfig cfg;
  ConfigReader root(j, "config");
  root.read("seed", cfg.seed);
  cfg.train.seed = cfg.seed;
  root.read("output_dir", cfg.output_dir);

  const bool has_dataset = root.has("dataset");
  const bool has_synth = root.has("synthetic");
  if (has_dataset && has_synth) throw ConfigError("config: give either 'dataset' or 'synthetic', not both");
  if (has_dataset) {
    ConfigReader d = root.object("dataset");
    std::string path;
    d.read("path", path);
    if (path.empty()) throw ConfigError("config.dataset.path: required");
    cfg.dataset_path = path;
    d.finish();
  }
  cfg.synthetic.seed = cfg.seed;
  if (has_synth) {
    ConfigReader s = root.object("synthetic");
    s.read("n", cfg.synthetic.n);
    s.read("image_dim", cfg.synthetic.image_dim);
    s.read("noise", cfg.synthetic.noise);
    s.read("balanced", cfg.synthetic.balanced);
    if (s.has("seed")) {
      s.read("seed", cfg.synthetic.seed);
      cfg.synthetic_seed_explicit = true;
    }
    if (s.has("modalities")) {
      const auto& arr = s.raw("modalities");
      if (!arr.is_array()) throw ConfigError("config.synthetic.modalities: expected a list");
      cfg.synthetic.modalities.clear();
      for (std::size_t i = 0; i < arr.size(); ++i) {
        ConfigReader m(arr[i], "config.synthetic.modalities[" + std::to_string(i) + "]");
        SynthModality sm;
        m.read("name", sm.name);
        m.read("prefix", sm.prefix);
        m.read("dim", sm.dim);
        m.read("k_signal", sm.k_signal);
        m.read("categorical", sm.categorical);
        m.finish();
        if (sm.name.empty()) throw ConfigError(m.field("name") + ": required");
        if (sm.prefix.empty()) throw ConfigError(m.field("prefix") + ": required");
        if (sm.k_signal > sm.dim) {
          throw ConfigError(m.field("k_signal") + ": modality '" + sm.name + "' has k_signal " +
                            std::to_string(sm.k_signal) + " > dim " + std::to_string(sm.dim));
        }
        cfg.synthetic.modalities.push_back(sm);
      }
    }
    s.finish();
  }

  if (root.has("modalities")) {
    const auto& arr = root.raw("modalities");
    if (!arr.is_array()) throw ConfigError("config.modalities: expected a list");
    cfg.modalities.clear();
    cfg.modalities_explicit = true;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ConfigReader m(arr[i], "config.modalities[" + std::to_string(i) + "]");
      ModalityDef def;
      m.read("name", def.name);
      m.read("prefix", def.prefix);
      m.read("categorical", def.categorical);
      m.finish();
      if (def.name.empty() || def.name == kImageModality || def.name == kMultimodal) {
        throw ConfigError(m.field("name") + ": must be non-empty and not 'image' or 'multimodal'");
      }
      if (def.prefix.empty()) throw ConfigError(m.field("prefix") + ": required");
      cfg.modalities.push_back(std::move(def));
    }
  }

  if (root.has("split")) {
    ConfigReader s = root.object("split");
    s.read("train", cfg.fractions.train);
    s.read("val", cfg.fractions.val);
    s.read("test", cfg.fractions.test);
    s.read("balanced", cfg.balanced);
    s.finish();
  }

  if (root.has("encoders")) {
    ConfigReader e = root.object("encoders");
    if (e.has("image")) detail::read_encoder(e.object("image"), cfg.model.image);
    if (e.has("label")) detail::read_encoder(e.object("label"), cfg.model.label);
    if (e.has("tabular")) detail::read_encoder(e.object("tabular"), cfg.model.tabular);
    e.finish();
  }
  if (cfg.model.image.kind != EncoderKind::image_cnn && cfg.model.image.kind != EncoderKind::image_mlp)
    throw ConfigError("config.encoders.image.kind: must be image_cnn or image_mlp");
  if (cfg.model.label.kind != EncoderKind::label_mlp) throw ConfigError("config.encoders.label.kind: must be label_mlp");
  if (cfg.model.tabular.kind != EncoderKind::tabular_mlp)
    throw ConfigError("config.encoders.tabular.kind: must be tabular_mlp");
  if (cfg.model.image.projection_dim != cfg.model.label.projection_dim ||
      cfg.model.image.projection_dim != cfg.model.tabular.projection_dim) {
    throw ConfigError("config.encoders: all encoders must share one projection_dim");
  }

  if (root.has("train")) {
    ConfigReader t = root.object("train");
    TrainConfig& tc = cfg.train;
    t.read("epochs", tc.epochs);
    t.read("batch_size", tc.batch_size);
    t.read("lr", tc.lr);
    t.read("weight_decay", tc.weight_decay);
    t.read("early_stop_patience", tc.early_stop_patience);
    t.read("temperature", tc.loss.temperature);
    t.read("unique_labels_per_batch", tc.unique_labels_per_batch);
    std::string dir = tc.loss.direction == LossDirection::symmetric ? "symmetric" : "paper_one_sided";
    t.read("loss_direction", dir);
    if (dir == "symmetric") tc.loss.direction = LossDirection::symmetric;
    else if (dir == "paper_one_sided") tc.loss.direction = LossDirection::paper_one_sided;
    else throw ConfigError(t.field("loss_direction") + ": expected symmetric or paper_one_sided");
    if (t.has("scheduler")) {
      ConfigReader s = t.object("scheduler");
      s.read("factor", tc.scheduler.factor);
      s.read("patience", tc.scheduler.patience);
      s.read("min_delta", tc.scheduler.min_delta);
      s.read("lr_floor", tc.scheduler.lr_floor);
      s.finish();
    }
    t.finish();
  }
  try {
    cfg.train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config.") + e.what());
  }

  if (root.has("eval")) {
    ConfigReader e = root.object("eval");
    e.read("runs", cfg.eval_runs);
    e.read("seeds", cfg.eval_seeds);
    e.read("grid_size", cfg.grid_size);
    std::string search = to_string(cfg.search);
    e.read("search", search);
    try {
      cfg.search = search_method_from_string(search);
    } catch (const ConfigError& err) {
      throw ConfigError(e.field("search") + ": " + err.what());
    }
    e.finish();
    if (cfg.eval_runs < 1) throw ConfigError("config.eval.runs: must be >= 1");
    if (!cfg.eval_seeds.empty() && cfg.eval_seeds.size() != cfg.eval_runs) {
      throw ConfigError("config.eval.seeds: expected " + std::to_string(cfg.eval_runs) + " seeds, got " +
                        std::to_string(cfg.eval_seeds.size()));
    }
    if (cfg.grid_size < 1) throw ConfigError("config.eval.grid_size: must be >= 1");
  }
  root.finish();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

/// Normalized JSON form of a config; parse_run_config(to_json(c)) == c.
inline nlohmann::json run_config_json(const RunConfig& c) {
  using nlohmann::json;
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  if (c.dataset_path) {
    j["dataset"] = {{"path", *c.dataset_path}};
  } else {
    json mods = json::array();
    for (const auto& m : c.synthetic.modalities)
      mods.push_back({{"name", m.name}, {"prefix", m.prefix}, {"dim", m.dim}, {"k_signal", m.k_signal},
                      {"categorical", m.categorical}});
    j["synthetic"] = {{"n", c.synthetic.n},
                      {"image_dim", c.synthetic.image_dim},
                      {"noise", c.synthetic.noise},
                      {"balanced", c.synthetic.balanced},
                      {"seed", c.synthetic.seed},
                      {"modalities", mods}};
  }
  if (c.modalities_explicit) {
    json mods = json::array();
    for (const auto& m : c.modalities)
      mods.push_back({{"name", m.name}, {"prefix", m.prefix}, {"categorical", m.categorical}});
    j["modalities"] = mods;
  }
  j["split"] = {{"train", c.fractions.train}, {"val", c.fractions.val}, {"test", c.fractions.test},
                {"balanced", c.balanced}};
  j["encoders"] = {{"image", detail::encoder_json(c.model.image)},
                   {"label", detail::encoder_json(c.model.label)},
                   {"tabular", detail::encoder_json(c.model.tabular)}};
  const TrainConfig& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"lr", t.lr},
                {"weight_decay", t.weight_decay},
                {"early_stop_patience", t.early_stop_patience},
                {"temperature", t.loss.temperature},
                {"loss_direction", t.loss.direction == LossDirection::symmetric ? "symmetric" : "paper_one_sided"},
                {"unique_labels_per_batch", t.unique_labels_per_batch},
                {"scheduler",
                 {{"factor", t.scheduler.factor},
                  {"patience", t.scheduler.patience},
                  {"min_delta", t.scheduler.min_delta},
                  {"lr_floor", t.scheduler.lr_floor}}}};
  j["eval"] = {{"runs", c.eval_runs}, {"seeds", c.run_seeds()}, {"grid_size", c.grid_size},
               {"search", to_string(c.search)}};
  return j;
}

/// Loads or generates the dataset described by the config (no split tags).
inline DatasetTable load_config_dataset(const RunConfig& cfg) {
  if (cfg.dataset_path) return load_dataset_file(*cfg.dataset_path, cfg.modality_defs());
  return synth_generate(cfg.synthetic).table;
}

}  // namespace protoclip

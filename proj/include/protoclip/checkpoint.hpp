#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "protoclip/data.hpp"
#include "protoclip/encoders.hpp"
#include "protoclip/error.hpp"
#include "protoclip/training.hpp"

namespace protoclip {

// Layout: "PCLP" | u32 version | u64 metadata length | metadata JSON |
// float32 arrays in manifest order. Little-endian, no padding.
inline constexpr char kCheckpointMagic[4] = {'P', 'C', 'L', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json config = nlohmann::json::object();
  TrainedModel model;

  bool has_tabular() const noexcept { return !model.tabular.empty(); }
};

namespace detail {

using nlohmann::json;

inline json encoder_config_json(const EncoderConfig& c) {
  json j;
  j["kind"] = to_string(c.kind);
  j["input_dim"] = c.input_dim;
  j["image"] = {{"height", c.image.height}, {"width", c.image.width}, {"channels", c.image.channels}};
  j["conv_channels"] = c.conv_channels;
  j["hidden_dims"] = c.hidden_dims;
  j["projection_dim"] = c.projection_dim;
  j["seed"] = c.seed;
  return j;
}

inline EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.kind = encoder_kind_from_string(j.at("kind").get<std::string>());
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.image.height = j.at("image").at("height").get<std::size_t>();
  c.image.width = j.at("image").at("width").get<std::size_t>();
  c.image.channels = j.at("image").at("channels").get<std::size_t>();
  c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  c.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
  c.projection_dim = j.at("projection_dim").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline json stats_json(const PreprocessStats& s) {
  json out = json::array();
  for (const auto& m : s.modalities) {
    json jm;
    jm["modality"] = m.modality;
    jm["numeric"] = json::array();
    for (const auto& c : m.numeric)
      jm["numeric"].push_back({{"name", c.name}, {"mean", c.mean}, {"std", c.std}, {"constant", c.constant}});
    jm["categorical"] = json::array();
    for (const auto& c : m.categorical) jm["categorical"].push_back({{"name", c.name}, {"vocabulary", c.vocabulary}});
    out.push_back(jm);
  }
  return out;
}

inline PreprocessStats stats_from_json(const json& j) {
  PreprocessStats s;
  for (const auto& jm : j) {
    ModalityStats m;
    m.modality = jm.at("modality").get<std::string>();
    for (const auto& c : jm.at("numeric"))
      m.numeric.push_back({c.at("name").get<std::string>(), c.at("mean").get<double>(), c.at("std").get<double>(),
                           c.at("constant").get<bool>()});
    for (const auto& c : jm.at("categorical"))
      m.categorical.push_back({c.at("name").get<std::string>(), c.at("vocabulary").get<std::vector<std::string>>()});
    s.modalities.push_back(std::move(m));
  }
  return s;
}

inline json modalities_json(const std::vector<ModalitySpec>& specs) {
  json out = json::array();
  for (const auto& m : specs) {
    out.push_back({{"name", m.name},
                   {"prefix", m.prefix},
                   {"numeric_columns", m.numeric_columns},
                   {"categorical_columns", m.categorical_columns},
                   {"vocabularies", m.vocabularies}});
  }
  return out;
}

inline std::vector<ModalitySpec> modalities_from_json(const json& j) {
  std::vector<ModalitySpec> out;
  for (const auto& m : j) {
    out.push_back({m.at("name").get<std::string>(), m.at("prefix").get<std::string>(),
                   m.at("numeric_columns").get<std::vector<std::string>>(),
                   m.at("categorical_columns").get<std::vector<std::string>>(),
                   m.at("vocabularies").get<std::map<std::string, std::vector<std::string>>>()});
  }
  return out;
}

struct NamedEncoder {
  std::string prefix;
  const EncoderParams* params;
};

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace detail

/// Serializes to the byte format; deterministic for equal checkpoints.
inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  using nlohmann::json;
  const TrainedModel& m = ckpt.model;
  std::vector<detail::NamedEncoder> encoders{{"image", &m.image}, {"label", &m.label}};
  for (const auto& t : m.tabular) encoders.push_back({"tabular/" + t.modality, &t.params});

  json meta;
  meta["format"] = "protoclip-checkpoint";
  meta["config"] = ckpt.config;
  meta["image_dim"] = m.image_dim;
  meta["modalities"] = detail::modalities_json(m.modalities);
  meta["stats"] = detail::stats_json(m.stats);
  meta["phase1"] = {{"best_val_loss", m.phase1_best_val_loss}, {"best_epoch", m.phase1_best_epoch}};
  meta["encoders"] = {{"image", detail::encoder_config_json(m.image.config)},
                      {"label", detail::encoder_config_json(m.label.config)}};
  meta["tabular"] = json::array();
  for (const auto& t : m.tabular) {
    meta["tabular"].push_back({{"modality", t.modality},
                               {"feature_names", t.feature_names},
                               {"best_val_loss", t.best_val_loss},
                               {"best_epoch", t.best_epoch},
                               {"encoder", detail::encoder_config_json(t.params.config)}});
  }
  json manifest = json::array();
  std::string payload;
  for (const auto& e : encoders) {
    const auto names = e.params->tensor_names();
    const auto tensors = e.params->tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      manifest.push_back({{"name", e.prefix + "/" + names[i]}, {"rows", tensors[i]->rows()}, {"cols", tensors[i]->cols()}});
      for (double v : tensors[i]->data()) {
        const float f = static_cast<float>(v);
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        detail::put_u32(payload, u);
      }
    }
  }
  meta["arrays"] = manifest;

  const std::string text = meta.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, ckpt.version);
  detail::put_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  using nlohmann::json;
  if (bytes.size() < 16) {
    throw FormatError("checkpoint truncated: header needs 16 bytes, found " + std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint: bad magic bytes");
  Checkpoint ckpt;
  ckpt.version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (ckpt.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(ckpt.version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t meta_len = detail::get_le(bytes, 8, 8);
  if (meta_len > bytes.size() - 16) {
    throw FormatError("checkpoint truncated: metadata needs " + std::to_string(meta_len) + " bytes, found " +
                      std::to_string(bytes.size() - 16));
  }
  json meta;
  try {
    meta = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(meta_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint metadata: ") + e.what());
  }

  try {
    if (meta.at("format") != "protoclip-checkpoint") throw FormatError("checkpoint metadata has the wrong format tag");
    ckpt.config = meta.at("config");
    TrainedModel& m = ckpt.model;
    m.image_dim = meta.at("image_dim").get<std::size_t>();
    m.modalities = detail::modalities_from_json(meta.at("modalities"));
    m.stats = detail::stats_from_json(meta.at("stats"));
    m.phase1_best_val_loss = meta.at("phase1").at("best_val_loss").get<double>();
    m.phase1_best_epoch = meta.at("phase1").at("best_epoch").get<std::size_t>();
    m.image = EncoderParams::zeros(detail::encoder_config_from_json(meta.at("encoders").at("image")));
    m.label = EncoderParams::zeros(detail::encoder_config_from_json(meta.at("encoders").at("label")));
    for (const auto& jt : meta.at("tabular")) {
      TabularEncoder t;
      t.modality = jt.at("modality").get<std::string>();
      t.feature_names = jt.at("feature_names").get<std::vector<std::string>>();
      t.best_val_loss = jt.at("best_val_loss").get<double>();
      t.best_epoch = jt.at("best_epoch").get<std::size_t>();
      t.params = EncoderParams::zeros(detail::encoder_config_from_json(jt.at("encoder")));
      m.tabular.push_back(std::move(t));
    }

    std::vector<detail::NamedEncoder> encoders{{"image", &m.image}, {"label", &m.label}};
    for (const auto& t : m.tabular) encoders.push_back({"tabular/" + t.modality, &t.params});
    std::vector<std::pair<std::string, Matrix*>> slots;
    for (const auto& e : encoders) {
      auto* params = const_cast<EncoderParams*>(e.params);
      const auto names = params->tensor_names();
      const auto tensors = params->tensors();
      for (std::size_t i = 0; i < tensors.size(); ++i) slots.emplace_back(e.prefix + "/" + names[i], tensors[i]);
    }
    const json& manifest = meta.at("arrays");
    if (manifest.size() != slots.size()) {
      throw FormatError("checkpoint manifest lists " + std::to_string(manifest.size()) + " arrays, model needs " +
                        std::to_string(slots.size()));
    }
    std::size_t expected = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const auto& entry = manifest[i];
      const auto rows = entry.at("rows").get<std::size_t>();
      const auto cols = entry.at("cols").get<std::size_t>();
      if (entry.at("name").get<std::string>() != slots[i].first || rows != slots[i].second->rows() ||
          cols != slots[i].second->cols()) {
        throw FormatError("checkpoint array " + std::to_string(i) + " (" + entry.at("name").get<std::string>() +
                          ") does not match the model layout " + slots[i].first + " " + slots[i].second->shape_string());
      }
      expected += rows * cols * 4;
    }
    const std::size_t offset = 16 + meta_len;
    const std::size_t actual = bytes.size() - offset;
    if (actual != expected) {
      throw FormatError(std::string(actual < expected ? "checkpoint truncated" : "checkpoint has trailing bytes") +
                        ": expected " + std::to_string(expected) + " bytes of array data, found " +
                        std::to_string(actual));
    }
    std::size_t pos = offset;
    for (auto& [name, tensor] : slots) {
      for (double& v : tensor->data()) {
        const auto u = static_cast<std::uint32_t>(detail::get_le(bytes, pos, 4));
        float f;
        std::memcpy(&f, &u, 4);
        v = f;
        pos += 4;
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace protoclip

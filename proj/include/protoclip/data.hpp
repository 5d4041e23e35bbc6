#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "protoclip/csv.hpp"
#include "protoclip/error.hpp"
#include "protoclip/matrix.hpp"

namespace protoclip {

// ---------------------------------------------------------------------------
// Labels

enum class DiagnosisClass { CN = 0, MCI = 1, AD = 2 };

inline constexpr double kClassValue[3] = {0.0, 0.5, 1.0};

inline std::string to_string(DiagnosisClass c) {
  switch (c) {
    case DiagnosisClass::CN: return "CN";
    case DiagnosisClass::MCI: return "MCI";
    case DiagnosisClass::AD: return "AD";
  }
  return "?";
}

/// Nearest of {0, 0.5, 1}; the boundaries 0.25 and 0.75 go to the lower class.
inline DiagnosisClass snap_class(double y) {
  if (y <= 0.25) return DiagnosisClass::CN;
  if (y <= 0.75) return DiagnosisClass::MCI;
  return DiagnosisClass::AD;
}

/// CN → 0, MCI → 0.5, AD → 1 (case and surrounding whitespace ignored);
/// numeric strings in [0, 1] pass through.
inline double encode_label_value(const std::string& raw) {
  std::string t;
  for (char c : raw)
    if (!std::isspace(static_cast<unsigned char>(c))) t.push_back(static_cast<char>(std::toupper(c)));
  if (t == "CN") return 0.0;
  if (t == "MCI") return 0.5;
  if (t == "AD") return 1.0;
  if (auto v = csv::parse_double(raw)) {
    if (*v >= 0.0 && *v <= 1.0) return *v;
    throw ConfigError("label value " + raw + " lies outside [0, 1]");
  }
  throw ConfigError("unknown label token '" + raw + "'");
}

inline double encode_label_value(double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("label value " + std::to_string(v) + " lies outside [0, 1]");
  return v;
}

// ---------------------------------------------------------------------------
// Schema

/// How CSV columns are claimed by a modality.
struct ModalityDef {
  std::string name;
  std::string prefix;
  /// Declared categorical columns with optional fixed vocabularies (empty
  /// vocabulary = learn it from the training split).
  std::map<std::string, std::vector<std::string>> categorical;
};

inline std::vector<ModalityDef> default_modality_defs() {
  return {{"biomarkers", "bio_", {}},
          {"cognitive", "cog_", {}},
          {"volumetric", "vol_", {}},
          {"history", "hist_", {}}};
}

/// Resolved columns of one modality in a concrete table.
struct ModalitySpec {
  std::string name;
  std::string prefix;
  std::vector<std::string> numeric_columns;
  std::vector<std::string> categorical_columns;
  /// Declared vocabularies by categorical column; absent = learned.
  std::map<std::string, std::vector<std::string>> vocabularies;
};

struct RawRow {
  std::vector<double> numeric;  // NaN marks a missing value
  std::vector<std::string> categorical;
};

enum class Split { unassigned, train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
  }
  return "?";
}

struct Sample {
  std::string id;
  Matrix image;  // 1×p
  std::vector<RawRow> modalities;  // parallel to DatasetTable::modalities
  std::string label_raw;
  double label = 0.0;
  Split split = Split::unassigned;
};

struct DatasetTable {
  std::vector<ModalitySpec> modalities;
  std::size_t image_dim = 0;
  std::vector<Sample> samples;

  std::size_t modality_index(const std::string& name) const {
    for (std::size_t i = 0; i < modalities.size(); ++i)
      if (modalities[i].name == name) return i;
    throw ConfigError("unknown modality '" + name + "'");
  }
  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == s) out.push_back(i);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Preprocessing

/// 1.0 at the vocabulary index of `value`, zeros elsewhere; all zeros when
/// the token is unknown.
inline Matrix one_hot(const std::string& value, const std::vector<std::string>& vocab) {
  if (vocab.empty()) throw ConfigError("one_hot: empty vocabulary");
  Matrix out(1, vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (vocab[i] == value) {
      out[i] = 1.0;
      break;
    }
  }
  return out;
}

struct ColumnStats {
  std::string name;
  double mean = 0.0;
  double std = 0.0;  // population std; 0 marks a constant column
  bool constant = false;
};

struct CategoricalStats {
  std::string name;
  std::vector<std::string> vocabulary;
};

struct ModalityStats {
  std::string modality;
  std::vector<ColumnStats> numeric;
  std::vector<CategoricalStats> categorical;

  std::size_t width() const {
    std::size_t w = numeric.size();
    for (const auto& c : categorical) w += c.vocabulary.size();
    return w;
  }
  /// Preprocessed column names: numeric columns, then `column=token` per one-hot slot.
  std::vector<std::string> feature_names() const {
    std::vector<std::string> out;
    for (const auto& c : numeric) out.push_back(c.name);
    for (const auto& c : categorical)
      for (const auto& tok : c.vocabulary) out.push_back(c.name + "=" + tok);
    return out;
  }
};

struct PreprocessStats {
  std::vector<ModalityStats> modalities;

  const ModalityStats& modality(const std::string& name) const {
    for (const auto& m : modalities)
      if (m.modality == name) return m;
    throw ConfigError("no preprocessing statistics for modality '" + name + "'");
  }
};

/// Per-column mean and population std over the given (training) samples.
inline PreprocessStats fit_preprocess(const DatasetTable& table, const std::vector<std::size_t>& train) {
  if (train.empty()) throw ConfigError("fit_preprocess: empty training split");
  PreprocessStats stats;
  for (std::size_t m = 0; m < table.modalities.size(); ++m) {
    const ModalitySpec& spec = table.modalities[m];
    ModalityStats ms;
    ms.modality = spec.name;
    for (std::size_t c = 0; c < spec.numeric_columns.size(); ++c) {
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t i : train) {
        const double v = table.samples[i].modalities[m].numeric[c];
        if (std::isnan(v)) continue;
        sum += v;
        ++count;
      }
      ColumnStats cs{spec.numeric_columns[c], 0.0, 0.0, true};
      if (count > 0) {
        cs.mean = sum / static_cast<double>(count);
        double ss = 0.0;
        for (std::size_t i : train) {
          const double v = table.samples[i].modalities[m].numeric[c];
          if (std::isnan(v)) continue;
          ss += (v - cs.mean) * (v - cs.mean);
        }
        cs.std = std::sqrt(ss / static_cast<double>(count));
        // Rounding residue of a constant column is not spread.
        cs.constant = cs.std <= 1e-12 * std::max(1.0, std::abs(cs.mean));
        if (cs.constant) cs.std = 0.0;
      }
      ms.numeric.push_back(cs);
    }
    for (std::size_t c = 0; c < spec.categorical_columns.size(); ++c) {
      const std::string& col = spec.categorical_columns[c];
      CategoricalStats cat{col, {}};
      auto declared = spec.vocabularies.find(col);
      if (declared != spec.vocabularies.end() && !declared->second.empty()) {
        cat.vocabulary = declared->second;
      } else {
        std::set<std::string> tokens;
        for (std::size_t i : train) {
          const std::string& tok = table.samples[i].modalities[m].categorical[c];
          if (!tok.empty()) tokens.insert(tok);
        }
        cat.vocabulary.assign(tokens.begin(), tokens.end());
      }
      if (cat.vocabulary.empty()) {
        throw ConfigError("categorical column '" + col + "' has no tokens in the training split");
      }
      ms.categorical.push_back(std::move(cat));
    }
    stats.modalities.push_back(std::move(ms));
  }
  return stats;
}

/// z-scored numerics (constant → 0, missing → 0) followed by one-hot groups.
inline Matrix apply_preprocess(const RawRow& row, const ModalityStats& stats) {
  if (row.numeric.size() != stats.numeric.size() || row.categorical.size() != stats.categorical.size()) {
    throw ConfigError("apply_preprocess: row schema does not match modality '" + stats.modality + "'");
  }
  Matrix out(1, stats.width());
  std::size_t k = 0;
  for (std::size_t c = 0; c < stats.numeric.size(); ++c, ++k) {
    const ColumnStats& cs = stats.numeric[c];
    const double v = row.numeric[c];
    if (std::isnan(v) || cs.constant) continue;
    out[k] = (v - cs.mean) / cs.std;
  }
  for (std::size_t c = 0; c < stats.categorical.size(); ++c) {
    const Matrix oh = one_hot(row.categorical[c], stats.categorical[c].vocabulary);
    for (std::size_t j = 0; j < oh.cols(); ++j) out[k++] = oh[j];
  }
  return out;
}

/// Preprocessed rows of one modality for the selected samples.
inline Matrix modality_matrix(const DatasetTable& table, const PreprocessStats& stats, std::size_t m,
                              const std::vector<std::size_t>& idx) {
  const ModalityStats& ms = stats.modality(table.modalities.at(m).name);
  Matrix out(idx.size(), ms.width());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Matrix row = apply_preprocess(table.samples[idx[r]].modalities[m], ms);
    std::copy(row.data().begin(), row.data().end(), out.row_span(r).begin());
  }
  return out;
}

inline Matrix image_matrix(const DatasetTable& table, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), table.image_dim);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Matrix& img = table.samples[idx[r]].image;
    std::copy(img.data().begin(), img.data().end(), out.row_span(r).begin());
  }
  return out;
}

inline std::vector<double> label_vector(const DatasetTable& table, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(table.samples[i].label);
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitFractions {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
};

/// Tags every sample train/val/test. Per stratum of n samples each split
/// gets floor(fraction·n); the leftover samples go to train first (at most
/// one), then to whichever of val/test has the larger fractional quota, so
/// every split stays within one sample of its quota. Balanced splits
/// stratify by canonical class.
inline DatasetTable make_splits(DatasetTable table, std::uint64_t seed, SplitFractions f = {},
                                bool balanced = true) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  std::vector<std::vector<std::size_t>> strata(balanced ? 3 : 1);
  for (std::size_t i = 0; i < table.samples.size(); ++i) {
    const std::size_t s = balanced ? static_cast<std::size_t>(snap_class(table.samples[i].label)) : 0;
    strata[s].push_back(i);
  }
  if (balanced) {
    for (std::size_t c = 0; c < 3; ++c) {
      if (!strata[c].empty() && strata[c].size() < 3) {
        throw ConfigError("class " + to_string(static_cast<DiagnosisClass>(c)) + " has only " +
                          std::to_string(strata[c].size()) + " samples; balanced splits need at least 3");
      }
    }
  }
  std::mt19937_64 rng(seed);
  for (auto& stratum : strata) {
    std::shuffle(stratum.begin(), stratum.end(), rng);
    const std::size_t n = stratum.size();
    const double quota[3] = {f.train * static_cast<double>(n), f.val * static_cast<double>(n),
                             f.test * static_cast<double>(n)};
    std::size_t count[3];
    double frac[3];
    for (int k = 0; k < 3; ++k) {
      count[k] = static_cast<std::size_t>(std::floor(quota[k] + 1e-9));
      frac[k] = std::max(0.0, quota[k] - static_cast<double>(count[k]));
    }
    std::size_t left = n - std::min(n, count[0] + count[1] + count[2]);
    if (left > 0 && frac[0] > 1e-9) {
      ++count[0];
      --left;
    }
    while (left > 0) {
      const int k = frac[1] >= frac[2] ? 1 : 2;
      ++count[k];
      frac[k] = -1.0;
      --left;
    }
    const std::size_t n_train = count[0], n_val = count[1];
    for (std::size_t r = 0; r < n; ++r) {
      table.samples[stratum[r]].split =
          r < n_train ? Split::train : (r < n_train + n_val ? Split::val : Split::test);
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// CSV ingestion

namespace detail {

inline std::vector<float> read_float32_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image file '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) {
    throw FormatError("image file '" + path.string() + "' length " + std::to_string(bytes.size()) +
                      " is not a multiple of 4");
  }
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * i]) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16) |
                            (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
    std::memcpy(&out[i], &u, 4);
  }
  return out;
}

inline bool starts_with(const std::string& s, const std::string& prefix) {
  return s.size() >= prefix.size() && s.compare(0, prefix.size(), prefix) == 0;
}

}  // namespace detail

/// Parses a CSV table. Modality columns are claimed by prefix; columns that
/// no modality claims are ignored. Undeclared columns holding any
/// non-numeric token are treated as categorical.
struct LoadOptions {
  bool require_label = true;
  bool require_image = true;
};

inline DatasetTable load_dataset(const csv::Table& csv, const std::vector<ModalityDef>& defs,
                                 const std::filesystem::path& base_dir = {}, LoadOptions opt = {}) {
  const auto& header = csv.header;
  auto find = [&](const std::string& name) -> std::ptrdiff_t {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  const std::ptrdiff_t id_col = find("sample_id");
  const std::ptrdiff_t label_col = find("label");
  const std::ptrdiff_t path_col = find("image_path");
  if (id_col < 0) throw ConfigError("dataset header lacks 'sample_id'");
  if (label_col < 0 && opt.require_label) throw ConfigError("dataset header lacks 'label'");

  std::vector<std::size_t> img_cols;
  for (std::size_t p = 0;; ++p) {
    const std::ptrdiff_t c = find("img_" + std::to_string(p));
    if (c < 0) break;
    img_cols.push_back(static_cast<std::size_t>(c));
  }
  const bool has_image = !img_cols.empty() || path_col >= 0;
  if (!has_image && opt.require_image) throw ConfigError("dataset has neither img_0.. columns nor image_path");

  DatasetTable table;
  std::vector<std::vector<std::size_t>> num_idx, cat_idx;
  std::map<std::string, std::string> claimed_by;
  for (const ModalityDef& def : defs) {
    if (def.prefix.empty()) throw ConfigError("modality '" + def.name + "' has an empty prefix");
    ModalitySpec spec{def.name, def.prefix, {}, {}, {}};
    std::vector<std::size_t> nidx, cidx;
    for (std::size_t c = 0; c < header.size(); ++c) {
      const std::string& col = header[c];
      if (!detail::starts_with(col, def.prefix)) continue;
      if (auto [it, fresh] = claimed_by.emplace(col, def.name); !fresh) {
        throw ConfigError("column '" + col + "' claimed by both '" + it->second + "' and '" + def.name + "'");
      }
      bool categorical = def.categorical.contains(col);
      if (!categorical) {
        for (const auto& row : csv.rows) {
          if (!row[c].empty() && !csv::parse_double(row[c])) {
            categorical = true;
            break;
          }
        }
      }
      if (categorical) {
        spec.categorical_columns.push_back(col);
        cidx.push_back(c);
        if (auto it = def.categorical.find(col); it != def.categorical.end() && !it->second.empty())
          spec.vocabularies[col] = it->second;
      } else {
        spec.numeric_columns.push_back(col);
        nidx.push_back(c);
      }
    }
    for (const auto& [col, vocab] : def.categorical) {
      if (std::find(header.begin(), header.end(), col) == header.end()) {
        throw ConfigError("declared categorical column '" + col + "' of modality '" + def.name +
                          "' is missing from the header");
      }
      if (!detail::starts_with(col, def.prefix)) {
        throw ConfigError("declared categorical column '" + col + "' lacks prefix '" + def.prefix + "'");
      }
    }
    if (nidx.empty() && cidx.empty()) {
      throw ConfigError("modality '" + def.name + "' claims no columns (prefix '" + def.prefix + "')");
    }
    table.modalities.push_back(std::move(spec));
    num_idx.push_back(std::move(nidx));
    cat_idx.push_back(std::move(cidx));
  }

  std::set<std::string> ids;
  for (const auto& row : csv.rows) {
    Sample s;
    s.id = row[id_col];
    if (!ids.insert(s.id).second) throw ConfigError("duplicate sample_id '" + s.id + "'");
    if (label_col >= 0 && (opt.require_label || !row[label_col].empty())) {
      s.label_raw = row[label_col];
      s.label = encode_label_value(s.label_raw);
    }
    if (!has_image) {
      s.image = Matrix(1, 0);
    } else if (!img_cols.empty()) {
      std::vector<double> px;
      px.reserve(img_cols.size());
      for (std::size_t c : img_cols) {
        auto v = csv::parse_double(row[c]);
        if (!v || !std::isfinite(*v)) throw ConfigError("sample '" + s.id + "': non-numeric " + header[c]);
        px.push_back(*v);
      }
      s.image = Matrix::row(std::move(px));
    } else {
      const auto pixels = detail::read_float32_file(base_dir / row[path_col]);
      s.image = Matrix::row(std::vector<double>(pixels.begin(), pixels.end()));
    }
    if (table.image_dim == 0) table.image_dim = s.image.cols();
    if (s.image.cols() != table.image_dim || (has_image && table.image_dim == 0)) {
      throw ConfigError("sample '" + s.id + "' image has " + std::to_string(s.image.cols()) +
                        " values, expected " + std::to_string(table.image_dim));
    }
    for (std::size_t m = 0; m < defs.size(); ++m) {
      RawRow r;
      for (std::size_t c : num_idx[m]) {
        if (row[c].empty()) {
          r.numeric.push_back(std::numeric_limits<double>::quiet_NaN());
        } else {
          auto v = csv::parse_double(row[c]);
          if (!v) throw ConfigError("sample '" + s.id + "': non-numeric " + header[c]);
          r.numeric.push_back(*v);
        }
      }
      for (std::size_t c : cat_idx[m]) r.categorical.push_back(row[c]);
      s.modalities.push_back(std::move(r));
    }
    table.samples.push_back(std::move(s));
  }
  return table;
}

inline DatasetTable load_dataset_file(const std::string& path, const std::vector<ModalityDef>& defs) {
  return load_dataset(csv::read_file(path), defs, std::filesystem::path(path).parent_path());
}

/// Writes the table with inline image columns; split tags are not stored.
inline void save_dataset(std::ostream& os, const DatasetTable& table) {
  csv::Row header{"sample_id", "label"};
  for (std::size_t p = 0; p < table.image_dim; ++p) header.push_back("img_" + std::to_string(p));
  for (const auto& m : table.modalities) {
    header.insert(header.end(), m.numeric_columns.begin(), m.numeric_columns.end());
    header.insert(header.end(), m.categorical_columns.begin(), m.categorical_columns.end());
  }
  csv::write_record(os, header);
  csv::Row row;
  for (const Sample& s : table.samples) {
    row.clear();
    row.push_back(s.id);
    row.push_back(s.label_raw);
    for (double v : s.image.data()) row.push_back(csv::format_double(v));
    for (const RawRow& r : s.modalities) {
      for (double v : r.numeric) row.push_back(std::isnan(v) ? std::string() : csv::format_double(v));
      row.insert(row.end(), r.categorical.begin(), r.categorical.end());
    }
    csv::write_record(os, row);
  }
}

/// Modality definitions reconstructed from a loaded table (prefix + declared vocabularies).
inline std::vector<ModalityDef> modality_defs(const DatasetTable& table) {
  std::vector<ModalityDef> defs;
  for (const auto& m : table.modalities) {
    ModalityDef d{m.name, m.prefix, {}};
    for (const auto& c : m.categorical_columns) {
      auto it = m.vocabularies.find(c);
      d.categorical[c] = it == m.vocabularies.end() ? std::vector<std::string>{} : it->second;
    }
    defs.push_back(std::move(d));
  }
  return defs;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthModality {
  std::string name;
  std::string prefix;
  std::size_t dim = 12;
  std::size_t k_signal = 3;
  bool categorical = true;
};

inline std::vector<SynthModality> default_synth_modalities() {
  return {{"biomarkers", "bio_", 12, 3, true},
          {"cognitive", "cog_", 12, 3, true},
          {"volumetric", "vol_", 12, 3, true},
          {"history", "hist_", 12, 3, true}};
}

struct SynthConfig {
  std::size_t n = 600;
  std::size_t image_dim = 32;
  std::vector<SynthModality> modalities = default_synth_modalities();
  double noise = 0.1;
  std::uint64_t seed = 0;
  /// Equal class counts, with z uniform inside each class interval.
  bool balanced = true;
  /// Fixed latent values, one per sample; overrides sampling when non-empty.
  std::vector<double> latent;
};

struct SignalMaskEntry {
  std::string modality;
  std::string column;
  bool is_signal = false;
};

struct SynthDataset {
  DatasetTable table;
  std::vector<SignalMaskEntry> mask;
};

inline std::string synth_column_name(const SynthModality& m, std::size_t j) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "f%02zu", j);
  return m.prefix + buf;
}

/// Latent z per sample drives everything: label = snap(z); image = fixed
/// random projection of (z, z², sin 2πz) plus noise; signal columns =
/// a·z + noise; other columns pure N(0, 1); one categorical column per
/// modality from thresholds at 1/3 and 2/3.
inline SynthDataset synth_generate(const SynthConfig& cfg) {
  if (cfg.n == 0) throw ConfigError("synthetic: n must be positive");
  if (cfg.image_dim == 0) throw ConfigError("synthetic: image_dim must be positive");
  if (!(cfg.noise >= 0.0)) throw ConfigError("synthetic: noise must be >= 0");
  if (!cfg.latent.empty() && cfg.latent.size() != cfg.n) {
    throw ConfigError("synthetic: latent override needs exactly n values");
  }
  std::set<std::string> names, prefixes;
  for (const auto& m : cfg.modalities) {
    if (m.dim == 0) throw ConfigError("synthetic: modality '" + m.name + "' has dim 0");
    if (m.k_signal > m.dim) {
      throw ConfigError("synthetic: modality '" + m.name + "' k_signal " + std::to_string(m.k_signal) +
                        " exceeds dim " + std::to_string(m.dim));
    }
    if (!names.insert(m.name).second) throw ConfigError("synthetic: duplicate modality '" + m.name + "'");
    if (m.prefix.empty()) throw ConfigError("synthetic: modality '" + m.name + "' has an empty prefix");
    for (const auto& p : prefixes) {
      if (detail::starts_with(p, m.prefix) || detail::starts_with(m.prefix, p)) {
        throw ConfigError("synthetic: prefix '" + m.prefix + "' overlaps '" + p + "'");
      }
    }
    prefixes.insert(m.prefix);
  }

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Matrix projection(3, cfg.image_dim);
  for (double& v : projection.data()) v = gauss(rng);

  struct ModalityPlan {
    std::vector<bool> signal;
    std::vector<double> slope;
  };
  std::vector<ModalityPlan> plans;
  SynthDataset out;
  for (const auto& m : cfg.modalities) {
    ModalityPlan plan;
    std::vector<std::size_t> order(m.dim);
    for (std::size_t j = 0; j < m.dim; ++j) order[j] = j;
    std::shuffle(order.begin(), order.end(), rng);
    plan.signal.assign(m.dim, false);
    for (std::size_t s = 0; s < m.k_signal; ++s) plan.signal[order[s]] = true;
    plan.slope.resize(m.dim);
    for (std::size_t j = 0; j < m.dim; ++j) {
      const double mag = 1.0 + unit(rng);
      plan.slope[j] = unit(rng) < 0.5 ? -mag : mag;
    }
    ModalitySpec spec{m.name, m.prefix, {}, {}, {}};
    for (std::size_t j = 0; j < m.dim; ++j) {
      spec.numeric_columns.push_back(synth_column_name(m, j));
      out.mask.push_back({m.name, spec.numeric_columns.back(), plan.signal[j]});
    }
    if (m.categorical) {
      const std::string col = m.prefix + "stage";
      spec.categorical_columns.push_back(col);
      spec.vocabularies[col] = {"low", "mid", "high"};
      out.mask.push_back({m.name, col, true});
    }
    out.table.modalities.push_back(std::move(spec));
    plans.push_back(std::move(plan));
  }
  out.table.image_dim = cfg.image_dim;

  constexpr double lo[3] = {0.0, 0.25, 0.75};
  constexpr double hi[3] = {0.25, 0.75, 1.0};
  for (std::size_t i = 0; i < cfg.n; ++i) {
    double z;
    if (!cfg.latent.empty()) {
      z = cfg.latent[i];
      if (!(z >= 0.0 && z <= 1.0)) throw ConfigError("synthetic: latent values must lie in [0, 1]");
    } else if (cfg.balanced) {
      const std::size_t c = i % 3;
      z = lo[c] + (hi[c] - lo[c]) * unit(rng);
    } else {
      z = unit(rng);
    }
    Sample s;
    char id[32];
    std::snprintf(id, sizeof id, "s%05zu", i);
    s.id = id;
    const DiagnosisClass cls = snap_class(z);
    s.label_raw = to_string(cls);
    s.label = kClassValue[static_cast<int>(cls)];

    const double feat[3] = {z, z * z, std::sin(2.0 * std::numbers::pi * z)};
    std::vector<double> px(cfg.image_dim);
    for (std::size_t p = 0; p < cfg.image_dim; ++p) {
      px[p] = feat[0] * projection(0, p) + feat[1] * projection(1, p) + feat[2] * projection(2, p) +
              cfg.noise * gauss(rng);
    }
    s.image = Matrix::row(std::move(px));

    for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
      RawRow r;
      for (std::size_t j = 0; j < cfg.modalities[m].dim; ++j) {
        r.numeric.push_back(plans[m].signal[j] ? plans[m].slope[j] * z + cfg.noise * gauss(rng) : gauss(rng));
      }
      if (cfg.modalities[m].categorical) {
        r.categorical.push_back(z < 1.0 / 3.0 ? "low" : (z < 2.0 / 3.0 ? "mid" : "high"));
      }
      s.modalities.push_back(std::move(r));
    }
    out.table.samples.push_back(std::move(s));
  }
  return out;
}

inline void write_signal_mask(std::ostream& os, const std::vector<SignalMaskEntry>& mask) {
  os << "modality,column,is_signal\n";
  for (const auto& e : mask) os << e.modality << ',' << e.column << ',' << (e.is_signal ? 1 : 0) << '\n';
}

}  // namespace protoclip

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "protoclip/data.hpp"
#include "protoclip/encoders.hpp"
#include "protoclip/error.hpp"
#include "protoclip/matrix.hpp"
#include "protoclip/training.hpp"

namespace protoclip {

inline constexpr const char* kImageModality = "image";
inline constexpr const char* kMultimodal = "multimodal";

// ---------------------------------------------------------------------------
// Similarity

/// Cosine between the concatenated parts and the label embedding tiled once
/// per part. For unit parts this is the mean of the per-part cosines; with a
/// single part it is the plain cosine.
inline double fused_similarity(std::span<const Embedding> parts, const Embedding& label) {
  if (parts.empty()) throw ConfigError("fused_similarity: no embeddings to fuse");
  const std::size_t d = label.dim();
  double xy = 0.0, xx = 0.0;
  for (const Embedding& p : parts) {
    if (p.dim() != d) {
      throw ShapeError("fused_similarity: part of dimension " + std::to_string(p.dim()) +
                       " vs label dimension " + std::to_string(d));
    }
    xy += dot(p.vector.data(), label.vector.data());
    xx += dot(p.vector.data(), p.vector.data());
  }
  const double yy = static_cast<double>(parts.size()) * dot(label.vector.data(), label.vector.data());
  const double denom = std::sqrt(xx) * std::sqrt(yy);
  if (denom <= kNormEpsilon) throw NumericError("fused_similarity: zero-norm input");
  return xy / denom;
}

// ---------------------------------------------------------------------------
// Label search

using SimilarityFn = std::function<double(double)>;

struct SearchResult {
  double value = 0.0;
  std::size_t index = 0;
  double similarity = 0.0;
  std::size_t evaluations = 0;
};

inline std::vector<double> uniform_grid(std::size_t points = 101) {
  if (points == 0) throw ConfigError("label grid needs at least one point");
  if (points == 1) return {0.0};
  std::vector<double> g(points);
  for (std::size_t i = 0; i < points; ++i) g[i] = static_cast<double>(i) / static_cast<double>(points - 1);
  return g;
}

/// Exact argmax; the first grid point wins ties.
inline SearchResult brute_force_label(const SimilarityFn& sim, std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("label search: empty grid");
  SearchResult r{grid[0], 0, sim(grid[0]), 1};
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double s = sim(grid[i]);
    ++r.evaluations;
    if (s > r.similarity) r = {grid[i], i, s, r.evaluations};
  }
  return r;
}

/// Ternary search over the grid index range. Each round compares the two
/// interior thirds and keeps the side holding the larger similarity; once at
/// most three candidates remain they are all compared, later candidates
/// winning ties. Exact for strictly unimodal similarity profiles.
inline SearchResult ternary_search_label(const SimilarityFn& sim, std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("label search: empty grid");
  std::map<std::size_t, double> seen;
  auto at = [&](std::size_t i) {
    auto it = seen.find(i);
    if (it != seen.end()) return it->second;
    const double s = sim(grid[i]);
    seen.emplace(i, s);
    return s;
  };
  std::size_t lo = 0, hi = grid.size() - 1;
  while (hi - lo > 2) {
    const std::size_t m1 = lo + (hi - lo) / 3;
    const std::size_t m2 = hi - (hi - lo) / 3;
    if (at(m1) > at(m2)) {
      hi = m2;
    } else {
      lo = m1;
    }
  }
  std::size_t best = lo;
  double best_s = at(lo);
  for (std::size_t i = lo + 1; i <= hi; ++i) {
    const double s = at(i);
    if (s >= best_s) {
      best = i;
      best_s = s;
    }
  }
  return {grid[best], best, best_s, seen.size()};
}

inline std::size_t ternary_evaluation_bound(std::size_t grid_size) {
  if (grid_size <= 1) return 1;
  return 2 * static_cast<std::size_t>(std::ceil(std::log(static_cast<double>(grid_size)) / std::log(1.5))) + 2;
}

enum class SearchMethod { ternary, exhaustive };

inline std::string to_string(SearchMethod m) { return m == SearchMethod::ternary ? "ternary" : "exhaustive"; }

inline SearchMethod search_method_from_string(const std::string& s) {
  if (s == "ternary") return SearchMethod::ternary;
  if (s == "exhaustive") return SearchMethod::exhaustive;
  throw ConfigError("unknown search method '" + s + "' (expected ternary or exhaustive)");
}

// ---------------------------------------------------------------------------
// Prediction

struct Prediction {
  std::string sample_id;
  double y_hat = 0.0;
  DiagnosisClass class_hat = DiagnosisClass::CN;
  double similarity = 0.0;
  std::vector<std::string> modalities;
};

/// Names usable in a modality subset: "image" plus every trained tabular modality.
inline std::vector<std::string> available_modalities(const TrainedModel& model) {
  std::vector<std::string> out{kImageModality};
  for (const auto& t : model.tabular) out.push_back(t.modality);
  return out;
}

inline void check_subset(const TrainedModel& model, const std::vector<std::string>& subset) {
  if (subset.empty()) throw ConfigError("modality subset is empty");
  const auto avail = available_modalities(model);
  for (const auto& s : subset) {
    if (std::find(avail.begin(), avail.end(), s) == avail.end()) {
      std::string list;
      for (const auto& a : avail) list += (list.empty() ? "" : ", ") + a;
      throw ConfigError("modality '" + s + "' is not in the checkpoint (available: " + list + ")");
    }
  }
}

/// Embeds a set of samples once per modality, then searches labels per sample.
class Predictor {
 public:
  Predictor(const TrainedModel& model, std::vector<double> grid = uniform_grid())
      : model_(&model), grid_(std::move(grid)) {
    if (grid_.empty()) throw ConfigError("label grid is empty");
    if (!std::is_sorted(grid_.begin(), grid_.end())) throw ConfigError("label grid must be sorted ascending");
    const Matrix emb = encode_batch(model.label, label_inputs(grid_));
    for (std::size_t i = 0; i < grid_.size(); ++i) label_embeddings_.push_back(Embedding{emb.row_copy(i)});
  }

  const std::vector<double>& grid() const noexcept { return grid_; }

  /// Per-modality embeddings of the given samples of `table`, keyed by name.
  std::map<std::string, Matrix> embed(const DatasetTable& table, const std::vector<std::size_t>& idx,
                                      const std::vector<std::string>& subset) const {
    check_subset(*model_, subset);
    std::map<std::string, Matrix> out;
    for (const auto& name : subset) {
      if (name == kImageModality) {
        if (table.image_dim != model_->image_dim) {
          throw ConfigError("image width " + std::to_string(table.image_dim) + " does not match the checkpoint's " +
                            std::to_string(model_->image_dim));
        }
        out[name] = encode_batch(model_->image, image_matrix(table, idx));
      } else {
        const std::size_t m = table.modality_index(name);
        out[name] = encode_batch(model_->find_tabular(name)->params, modality_matrix(table, model_->stats, m, idx));
      }
    }
    return out;
  }

  SearchResult search(std::span<const Embedding> parts, SearchMethod method) const {
    auto sim = [&](double y) {
      const auto it = std::lower_bound(grid_.begin(), grid_.end(), y);
      return fused_similarity(parts, label_embeddings_[static_cast<std::size_t>(it - grid_.begin())]);
    };
    return method == SearchMethod::ternary ? ternary_search_label(sim, grid_) : brute_force_label(sim, grid_);
  }

  /// Predictions for `idx` in order; `threads` > 1 splits the samples across workers.
  std::vector<Prediction> predict(const DatasetTable& table, const std::vector<std::size_t>& idx,
                                  const std::vector<std::string>& subset, SearchMethod method,
                                  std::size_t threads = 1) const {
    const auto emb = embed(table, idx, subset);
    std::vector<Prediction> out(idx.size());
    auto work = [&](std::size_t begin, std::size_t end) {
      std::vector<Embedding> parts(subset.size());
      for (std::size_t r = begin; r < end; ++r) {
        for (std::size_t k = 0; k < subset.size(); ++k) parts[k] = Embedding{emb.at(subset[k]).row_copy(r)};
        const SearchResult s = search(parts, method);
        out[r] = Prediction{table.samples[idx[r]].id, s.value, snap_class(s.value), s.similarity, subset};
      }
    };
    threads = std::max<std::size_t>(1, std::min(threads, idx.size()));
    if (threads == 1) {
      work(0, idx.size());
    } else {
      std::vector<std::thread> pool;
      const std::size_t chunk = (idx.size() + threads - 1) / threads;
      for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t b = t * chunk, e = std::min(idx.size(), b + chunk);
        if (b < e) pool.emplace_back(work, b, e);
      }
      for (auto& th : pool) th.join();
    }
    return out;
  }

 private:
  const TrainedModel* model_;
  std::vector<double> grid_;
  std::vector<Embedding> label_embeddings_;
};

/// Single-sample convenience over Predictor.
inline Prediction predict(const TrainedModel& model, const DatasetTable& table, std::size_t sample,
                          const std::vector<std::string>& subset, SearchMethod method,
                          const std::vector<double>& grid = uniform_grid()) {
  return Predictor(model, grid).predict(table, {sample}, subset, method).front();
}

inline std::string join_modalities(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : "+") + n;
  return out;
}

inline void write_predictions_csv(std::ostream& os, const std::vector<Prediction>& preds) {
  os << "sample_id,y_hat,class_hat,similarity,modalities\n";
  for (const auto& p : preds) {
    os << csv::escape(p.sample_id) << ',' << csv::format_double(p.y_hat) << ',' << to_string(p.class_hat) << ','
       << csv::format_double(p.similarity) << ',' << join_modalities(p.modalities) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Rows are actual CN/MCI/AD, columns predicted.
struct ConfusionMatrix {
  std::array<std::array<std::size_t, 3>, 3> counts{};

  void add(DiagnosisClass actual, DiagnosisClass predicted) {
    ++counts[static_cast<std::size_t>(actual)][static_cast<std::size_t>(predicted)];
  }
  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& r : counts)
      for (std::size_t c : r) t += c;
    return t;
  }
  std::size_t row_sum(DiagnosisClass actual) const {
    const auto& r = counts[static_cast<std::size_t>(actual)];
    return r[0] + r[1] + r[2];
  }
};

struct RunAccuracy {
  double all_labels = 0.0;
  double ad_vs_cn = 0.0;
  ConfusionMatrix confusion;
};

/// Accuracy of predictions against the true classes of the same samples.
/// AD-vs-CN counts only samples whose true class is CN or AD.
inline RunAccuracy score_predictions(const DatasetTable& table, const std::vector<std::size_t>& idx,
                                     const std::vector<Prediction>& preds) {
  RunAccuracy acc;
  std::size_t correct = 0, ext = 0, ext_correct = 0;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const DiagnosisClass actual = snap_class(table.samples[idx[r]].label);
    acc.confusion.add(actual, preds[r].class_hat);
    const bool ok = actual == preds[r].class_hat;
    correct += ok;
    if (actual != DiagnosisClass::MCI) {
      ++ext;
      ext_correct += ok;
    }
  }
  acc.all_labels = idx.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(idx.size());
  acc.ad_vs_cn = ext == 0 ? 0.0 : static_cast<double>(ext_correct) / static_cast<double>(ext);
  return acc;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample std (divisor runs − 1); 0 for a single run
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

struct EvalRow {
  std::string configuration;  // "image", a tabular modality, or "multimodal"
  std::vector<std::string> modalities;
  std::vector<double> all_labels;  // per run
  std::vector<double> ad_vs_cn;    // per run
  ConfusionMatrix last_confusion;
};

struct EvalSummary {
  std::size_t runs = 0;
  bool single_run = false;
  std::vector<std::uint64_t> seeds;
  SearchMethod search = SearchMethod::exhaustive;
  std::size_t grid_size = 0;
  std::vector<EvalRow> rows;

  const EvalRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.configuration == name) return r;
    throw ConfigError("no evaluation row '" + name + "'");
  }
};

/// Evaluation configurations: each single modality, then all of them fused.
inline std::vector<std::pair<std::string, std::vector<std::string>>> evaluation_configurations(
    const TrainedModel& model) {
  std::vector<std::pair<std::string, std::vector<std::string>>> out;
  const auto all = available_modalities(model);
  for (const auto& m : all) out.push_back({m, {m}});
  out.push_back({kMultimodal, all});
  return out;
}

/// Scores one trained model on the test split of `table`, per configuration.
inline std::vector<std::pair<std::string, RunAccuracy>> evaluate_model(const TrainedModel& model,
                                                                       const DatasetTable& table, SearchMethod method,
                                                                       const std::vector<double>& grid,
                                                                       std::size_t threads = 1) {
  const auto test = table.indices(Split::test);
  if (test.empty()) throw ConfigError("evaluation needs a non-empty test split");
  const Predictor predictor(model, grid);
  std::vector<std::pair<std::string, RunAccuracy>> out;
  for (const auto& [name, subset] : evaluation_configurations(model)) {
    out.emplace_back(name, score_predictions(table, test, predictor.predict(table, test, subset, method, threads)));
  }
  return out;
}

inline void accumulate_run(EvalSummary& summary, const TrainedModel& model,
                           const std::vector<std::pair<std::string, RunAccuracy>>& run) {
  if (summary.rows.empty()) {
    for (const auto& [name, subset] : evaluation_configurations(model)) summary.rows.push_back({name, subset, {}, {}, {}});
  }
  for (const auto& [name, acc] : run) {
    auto it = std::find_if(summary.rows.begin(), summary.rows.end(),
                           [&](const EvalRow& r) { return r.configuration == name; });
    if (it == summary.rows.end()) throw ConfigError("evaluation configuration '" + name + "' changed between runs");
    it->all_labels.push_back(acc.all_labels);
    it->ad_vs_cn.push_back(acc.ad_vs_cn);
    it->last_confusion = acc.confusion;
  }
  ++summary.runs;
  summary.single_run = summary.runs == 1;
}

struct EvaluateOptions {
  std::size_t runs = 5;
  std::vector<std::uint64_t> seeds;  // one per run
  SplitFractions fractions;
  bool balanced = true;
  SearchMethod search = SearchMethod::exhaustive;
  std::size_t grid_size = 101;
  std::size_t threads = 1;
};

/// Repeats split → two-phase training → test scoring once per seed.
/// `on_run` (optional) sees each run's trained model.
inline EvalSummary evaluate(const DatasetTable& table, const ModelConfig& mc, TrainConfig train,
                            const EvaluateOptions& opt,
                            const std::function<void(std::size_t, const TrainOutput&)>& on_run = {}) {
  if (opt.runs < 1) throw ConfigError("evaluation needs runs >= 1");
  if (opt.seeds.size() != opt.runs) {
    throw ConfigError("evaluation needs exactly one seed per run (" + std::to_string(opt.runs) + "), got " +
                      std::to_string(opt.seeds.size()));
  }
  EvalSummary summary;
  summary.seeds = opt.seeds;
  summary.search = opt.search;
  summary.grid_size = opt.grid_size;
  const auto grid = uniform_grid(opt.grid_size);
  for (std::size_t r = 0; r < opt.runs; ++r) {
    const DatasetTable split = make_splits(table, opt.seeds[r], opt.fractions, opt.balanced);
    train.seed = opt.seeds[r];
    const TrainOutput trained = train_model(split, mc, train);
    if (on_run) on_run(r, trained);
    accumulate_run(summary, trained.model, evaluate_model(trained.model, split, opt.search, grid, opt.threads));
  }
  return summary;
}

inline nlohmann::json summary_json(const EvalSummary& s) {
  using nlohmann::json;
  json j;
  j["runs"] = s.runs;
  j["single_run"] = s.single_run;
  j["seeds"] = s.seeds;
  j["search"] = to_string(s.search);
  j["grid_size"] = s.grid_size;
  j["class_order"] = {"CN", "MCI", "AD"};
  j["rows"] = json::array();
  for (const auto& r : s.rows) {
    const MeanStd all = mean_std(r.all_labels), ext = mean_std(r.ad_vs_cn);
    json cm = json::array();
    for (const auto& row : r.last_confusion.counts) cm.push_back(row);
    j["rows"].push_back({{"configuration", r.configuration},
                         {"modalities", r.modalities},
                         {"ad_vs_cn", {{"mean", ext.mean}, {"std", ext.std}, {"per_run", r.ad_vs_cn}}},
                         {"all_labels", {{"mean", all.mean}, {"std", all.std}, {"per_run", r.all_labels}}},
                         {"confusion_last_run", cm}});
  }
  return j;
}

/// Confusion counts of every configuration from the last run.
inline void write_confusion_csv(std::ostream& os, const EvalSummary& s) {
  os << "configuration,actual,predicted_CN,predicted_MCI,predicted_AD\n";
  static constexpr const char* names[3] = {"CN", "MCI", "AD"};
  for (const auto& r : s.rows)
    for (std::size_t a = 0; a < 3; ++a)
      os << r.configuration << ',' << names[a] << ',' << r.last_confusion.counts[a][0] << ','
         << r.last_confusion.counts[a][1] << ',' << r.last_confusion.counts[a][2] << '\n';
}

// ---------------------------------------------------------------------------
// Emergent alignment

struct AlignmentResult {
  double matched_mean = 0.0;
  double mismatched_mean = 0.0;
  double gap() const noexcept { return matched_mean - mismatched_mean; }
};

/// Mean cosine between two modality embeddings of the same sample versus a
/// cyclically shifted (never self) pairing.
inline AlignmentResult alignment_from_embeddings(const Matrix& a, const Matrix& b, std::uint64_t seed) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("alignment embeddings differ: " + a.shape_string() + " vs " + b.shape_string());
  }
  const std::size_t n = a.rows();
  if (n < 2) throw ConfigError("alignment needs at least two samples");
  std::mt19937_64 rng(seed);
  const std::size_t shift = std::uniform_int_distribution<std::size_t>(1, n - 1)(rng);
  AlignmentResult r;
  for (std::size_t i = 0; i < n; ++i) {
    r.matched_mean += dot(a.row_span(i), b.row_span(i));
    r.mismatched_mean += dot(a.row_span(i), b.row_span((i + shift) % n));
  }
  r.matched_mean /= static_cast<double>(n);
  r.mismatched_mean /= static_cast<double>(n);
  return r;
}

inline AlignmentResult cross_modal_alignment(const EncoderParams& enc1, const EncoderParams& enc2,
                                             const DatasetTable& table, const PreprocessStats& stats,
                                             const std::string& m1, const std::string& m2,
                                             const std::vector<std::size_t>& idx, std::uint64_t seed = 0) {
  const Matrix a = encode_batch(enc1, modality_matrix(table, stats, table.modality_index(m1), idx));
  const Matrix b = encode_batch(enc2, modality_matrix(table, stats, table.modality_index(m2), idx));
  return alignment_from_embeddings(a, b, seed);
}

inline AlignmentResult cross_modal_alignment(const TrainedModel& model, const DatasetTable& table,
                                             const std::string& m1, const std::string& m2,
                                             const std::vector<std::size_t>& idx, std::uint64_t seed = 0) {
  const TabularEncoder* a = model.find_tabular(m1);
  const TabularEncoder* b = model.find_tabular(m2);
  if (!a || !b) throw ConfigError("cross-modal alignment needs trained encoders for '" + m1 + "' and '" + m2 + "'");
  return cross_modal_alignment(a->params, b->params, table, model.stats, m1, m2, idx, seed);
}

}  // namespace protoclip

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "protoclip/contrastive.hpp"
#include "protoclip/data.hpp"
#include "protoclip/encoders.hpp"
#include "protoclip/error.hpp"
#include "protoclip/matrix.hpp"
#include "protoclip/tape.hpp"

namespace protoclip {

/// A non-finite training loss. Carries the 1-based epoch it occurred in.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& task, std::size_t epoch)
      : NumericError(task + ": non-finite loss in epoch " + std::to_string(epoch)), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

/// θ ← θ − lr·m̂/(√v̂ + ε) − lr·weight_decay·θ.
inline void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state,
                      double lr, double weight_decay) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    for (const Matrix* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(grads[i]) || !params[i]->same_shape(state.m[i])) {
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " is " + params[i]->shape_string() +
                       " but gradient is " + grads[i].shape_string());
    }
    if (!grads[i].all_finite()) throw NumericError("adam_step: non-finite gradient for parameter " + std::to_string(i));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i]->data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      theta[j] -= lr * mhat / (std::sqrt(vhat) + state.eps) + lr * weight_decay * theta[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Reduce-on-plateau

struct SchedulerConfig {
  double factor = 0.1;
  std::size_t patience = 10;
  double min_delta = 1e-5;
  double lr_floor = 1e-7;
};

class PlateauScheduler {
 public:
  PlateauScheduler(double lr, SchedulerConfig cfg) : lr_(lr), cfg_(cfg) {}

  /// Feeds one epoch's validation loss; returns the (possibly reduced) rate.
  double step(double val_loss) {
    if (!std::isfinite(val_loss)) throw NumericError("scheduler: non-finite validation loss");
    if (val_loss < best_ - cfg_.min_delta) {
      best_ = val_loss;
      stalls_ = 0;
    } else if (++stalls_ >= cfg_.patience) {
      lr_ = std::max(lr_ * cfg_.factor, cfg_.lr_floor);
      stalls_ = 0;
    }
    return lr_;
  }

  double lr() const noexcept { return lr_; }
  std::size_t stalls() const noexcept { return stalls_; }

 private:
  double lr_;
  SchedulerConfig cfg_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stalls_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t epochs = 64;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  double weight_decay = 0.01;
  SchedulerConfig scheduler;
  std::size_t early_stop_patience = 16;
  LossConfig loss;
  /// Batches never repeat a label value (avoids false negatives in phase 1).
  bool unique_labels_per_batch = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError("train.lr must be > 0");
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(scheduler.factor > 0 && scheduler.factor < 1)) throw ConfigError("train.scheduler.factor must lie in (0, 1)");
    if (scheduler.patience < 1) throw ConfigError("train.scheduler.patience must be >= 1");
    if (!(scheduler.min_delta >= 0)) throw ConfigError("train.scheduler.min_delta must be >= 0");
    if (!(scheduler.lr_floor > 0)) throw ConfigError("train.scheduler.lr_floor must be > 0");
    if (early_stop_patience < 1) throw ConfigError("train.early_stop_patience must be >= 1");
    if (!(loss.temperature > 0)) throw ConfigError("train.temperature must be > 0");
  }
};

/// Deterministic 64-bit mix of a seed and a stream name.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Generic contrastive task

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

/// Produces the matched (a, b) embedding batches for the given sample indices.
using PairFn = std::function<std::pair<Var, Var>(Tape&, std::span<const BoundEncoder>,
                                                 std::span<const std::size_t>)>;

struct ContrastiveTask {
  std::string name;
  std::vector<EncoderParams*> encoders;  // trained in place
  PairFn pairs;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  /// Per-sample label values, used only for unique-label batching.
  std::vector<double> labels;
};

struct TaskResult {
  std::vector<EpochRecord> history;
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
  std::size_t best_epoch = 0;  // 0 = the initialization
  bool stopped_early = false;
};

namespace detail {

inline std::vector<Matrix*> all_tensors(const std::vector<EncoderParams*>& encoders) {
  std::vector<Matrix*> out;
  for (EncoderParams* e : encoders)
    for (Matrix* m : e->tensors()) out.push_back(m);
  return out;
}

inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                          std::size_t batch_size, const std::vector<double>* labels) {
  std::vector<std::vector<std::size_t>> batches;
  if (!labels) {
    for (std::size_t b = 0; b < order.size(); b += batch_size) {
      batches.emplace_back(order.begin() + b, order.begin() + std::min(order.size(), b + batch_size));
    }
    return batches;
  }
  // Greedy: each sample joins the first open batch lacking its label value.
  std::vector<std::vector<std::size_t>> open;
  for (std::size_t i : order) {
    bool placed = false;
    for (auto& b : open) {
      if (b.size() >= batch_size) continue;
      const bool clash = std::any_of(b.begin(), b.end(), [&](std::size_t j) { return (*labels)[j] == (*labels)[i]; });
      if (!clash) {
        b.push_back(i);
        placed = true;
        break;
      }
    }
    if (!placed) open.push_back({i});
  }
  return open;
}

}  // namespace detail

/// Size-weighted mean loss over fixed-order batches, parameters untouched.
inline double evaluate_task_loss(const ContrastiveTask& task, const std::vector<const EncoderParams*>& encoders,
                                 const std::vector<std::size_t>& idx, const TrainConfig& cfg) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& batch : detail::make_batches(idx, cfg.batch_size, nullptr)) {
    Tape tape;
    std::vector<BoundEncoder> bound;
    for (const EncoderParams* e : encoders) bound.push_back(bind(tape, *e, false));
    auto [a, b] = task.pairs(tape, bound, batch);
    total += clip_loss(a, b, cfg.loss).value()[0] * static_cast<double>(batch.size());
    count += batch.size();
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

inline EncoderParams rounded_copy(const EncoderParams& p) {
  EncoderParams out = p;
  for (Matrix* m : out.tensors()) *m = round_to_float32(*m);
  return out;
}

/// One shuffled pass of Adam updates; returns the size-weighted train loss.
inline double train_epoch(const ContrastiveTask& task, AdamState& adam, double lr, const TrainConfig& cfg,
                          std::mt19937_64& rng, std::size_t epoch) {
  std::vector<std::size_t> order = task.train;
  std::shuffle(order.begin(), order.end(), rng);
  const auto batches =
      detail::make_batches(order, cfg.batch_size, cfg.unique_labels_per_batch ? &task.labels : nullptr);
  std::vector<Matrix*> params = detail::all_tensors(task.encoders);
  double total = 0.0;
  std::size_t count = 0;
  std::vector<Matrix> grads;
  for (const auto& batch : batches) {
    Tape tape;
    std::vector<BoundEncoder> bound;
    for (EncoderParams* e : task.encoders) bound.push_back(bind(tape, *e, true));
    Var loss;
    try {
      auto [a, b] = task.pairs(tape, bound, batch);
      loss = clip_loss(a, b, cfg.loss);
    } catch (const NumericError&) {
      throw DivergenceError(task.name, epoch);
    }
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw DivergenceError(task.name, epoch);
    tape.backward(loss);
    grads.clear();
    for (const auto& be : bound)
      for (Var v : be.vars) grads.push_back(tape.grad(v));
    for (const Matrix& g : grads)
      if (!g.all_finite()) throw DivergenceError(task.name, epoch);
    adam_step(params, grads, adam, lr, cfg.weight_decay);
    total += value * static_cast<double>(batch.size());
    count += batch.size();
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

/// Trains the task's encoders with Adam, reduce-on-plateau and early
/// stopping. Validation uses float32-rounded parameters, the precision a
/// checkpoint stores, so the recorded best loss is reproducible from disk.
/// On return the encoders hold the best (rounded) snapshot.
inline TaskResult run_task(ContrastiveTask& task, const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (task.train.empty()) throw ConfigError(task.name + ": empty training split");
  if (task.val.empty()) throw ConfigError(task.name + ": empty validation split");

  auto rounded_all = [&] {
    std::vector<EncoderParams> out;
    for (EncoderParams* e : task.encoders) out.push_back(rounded_copy(*e));
    return out;
  };
  auto val_loss_of = [&](const std::vector<EncoderParams>& snap) {
    std::vector<const EncoderParams*> ptrs;
    for (const auto& e : snap) ptrs.push_back(&e);
    const double v = evaluate_task_loss(task, ptrs, task.val, cfg);
    return v;
  };

  TaskResult result;
  std::vector<EncoderParams> best = rounded_all();
  result.initial_val_loss = val_loss_of(best);
  if (!std::isfinite(result.initial_val_loss)) throw DivergenceError(task.name, 0);
  result.best_val_loss = result.initial_val_loss;

  std::mt19937_64 rng(seed);
  AdamState adam;
  PlateauScheduler scheduler(cfg.lr, cfg.scheduler);
  double lr = cfg.lr;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = train_epoch(task, adam, lr, cfg, rng, epoch);
    std::vector<EncoderParams> snap = rounded_all();
    try {
      rec.val_loss = val_loss_of(snap);
    } catch (const NumericError&) {
      throw DivergenceError(task.name, epoch);
    }
    if (!std::isfinite(rec.val_loss)) throw DivergenceError(task.name, epoch);
    result.history.push_back(rec);
    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
      best = std::move(snap);
      since_best = 0;
    } else {
      ++since_best;
    }
    lr = scheduler.step(rec.val_loss);
    if (since_best >= cfg.early_stop_patience) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  for (std::size_t i = 0; i < task.encoders.size(); ++i) *task.encoders[i] = std::move(best[i]);
  return result;
}

// ---------------------------------------------------------------------------
// Two-phase protocol

/// Architecture of every encoder; input widths are filled from the data.
struct ModelConfig {
  EncoderConfig image{EncoderKind::image_mlp, 0, {}, {8, 16}, {128}, 128, 0};
  EncoderConfig label{EncoderKind::label_mlp, 1, {}, {}, {64}, 128, 0};
  EncoderConfig tabular{EncoderKind::tabular_mlp, 0, {}, {}, {128}, 128, 0};
};

struct TabularEncoder {
  std::string modality;
  EncoderParams params;
  std::vector<std::string> feature_names;
  double best_val_loss = 0.0;
  std::size_t best_epoch = 0;
};

/// Everything inference needs: encoders, preprocessing and schema.
struct TrainedModel {
  std::vector<ModalitySpec> modalities;
  std::size_t image_dim = 0;
  PreprocessStats stats;
  EncoderParams image;
  EncoderParams label;
  double phase1_best_val_loss = 0.0;
  std::size_t phase1_best_epoch = 0;
  std::vector<TabularEncoder> tabular;

  const TabularEncoder* find_tabular(const std::string& name) const {
    for (const auto& t : tabular)
      if (t.modality == name) return &t;
    return nullptr;
  }
};

struct HistoryRow {
  std::string phase;  // "1" or "2:<modality>"
  EpochRecord record;
};

/// Precomputed inputs of a split table, shared by both phases.
struct PreparedData {
  const DatasetTable* table = nullptr;
  std::vector<std::size_t> train, val;
  Matrix images;                  // all samples
  std::vector<double> labels;     // all samples
  std::vector<Matrix> modalities; // all samples, preprocessed
};

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto src = m.row_span(idx[r]);
    std::copy(src.begin(), src.end(), out.row_span(r).begin());
  }
  return out;
}

inline PreparedData prepare(const DatasetTable& table, const PreprocessStats& stats) {
  PreparedData d;
  d.table = &table;
  d.train = table.indices(Split::train);
  d.val = table.indices(Split::val);
  std::vector<std::size_t> all(table.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  d.images = image_matrix(table, all);
  d.labels = label_vector(table, all);
  for (std::size_t m = 0; m < table.modalities.size(); ++m) d.modalities.push_back(modality_matrix(table, stats, m, all));
  return d;
}

inline ContrastiveTask phase1_task(const PreparedData& d, EncoderParams& image, EncoderParams& label) {
  ContrastiveTask task;
  task.name = "phase 1 (image-label)";
  task.encoders = {&image, &label};
  task.train = d.train;
  task.val = d.val;
  task.labels = d.labels;
  task.pairs = [&d](Tape& tape, std::span<const BoundEncoder> enc, std::span<const std::size_t> idx) {
    Matrix ys(idx.size(), 1);
    for (std::size_t r = 0; r < idx.size(); ++r) ys[r] = d.labels[idx[r]];
    Var q = forward(enc[0], tape.constant(gather_rows(d.images, idx)));
    Var k = forward(enc[1], tape.constant(ys));
    return std::pair{q, k};
  };
  return task;
}

/// Phase-2 task for modality `m`; `image_embeddings` come from the frozen image encoder.
inline ContrastiveTask phase2_task(const PreparedData& d, std::size_t m, const Matrix& image_embeddings,
                                   EncoderParams& tabular) {
  ContrastiveTask task;
  task.name = "phase 2 (" + d.table->modalities[m].name + "-image)";
  task.encoders = {&tabular};
  task.train = d.train;
  task.val = d.val;
  task.labels = d.labels;
  task.pairs = [&d, m, &image_embeddings](Tape& tape, std::span<const BoundEncoder> enc,
                                          std::span<const std::size_t> idx) {
    Var k = forward(enc[0], tape.constant(gather_rows(d.modalities[m], idx)));
    Var q = tape.constant(gather_rows(image_embeddings, idx));
    return std::pair{k, q};
  };
  return task;
}

struct TrainOutput {
  TrainedModel model;
  std::vector<HistoryRow> history;
};

inline EncoderConfig image_encoder_config(const ModelConfig& mc, const DatasetTable& table, std::uint64_t seed) {
  EncoderConfig c = mc.image;
  c.input_dim = table.image_dim;
  c.seed = derive_seed(seed, "encoder:image");
  return c;
}

inline EncoderConfig label_encoder_config(const ModelConfig& mc, std::uint64_t seed) {
  EncoderConfig c = mc.label;
  c.input_dim = 1;
  c.seed = derive_seed(seed, "encoder:label");
  return c;
}

inline EncoderConfig tabular_encoder_config(const ModelConfig& mc, const ModalityStats& ms, std::uint64_t seed) {
  EncoderConfig c = mc.tabular;
  c.kind = EncoderKind::tabular_mlp;
  c.input_dim = ms.width();
  c.seed = derive_seed(seed, "encoder:tabular:" + ms.modality);
  return c;
}

/// Phase 1 only: image and label encoders trained contrastively.
inline TrainOutput train_phase1(const DatasetTable& table, const ModelConfig& mc, const TrainConfig& cfg) {
  TrainOutput out;
  TrainedModel& model = out.model;
  model.modalities = table.modalities;
  model.image_dim = table.image_dim;
  model.stats = fit_preprocess(table, table.indices(Split::train));
  model.image = init_params(image_encoder_config(mc, table, cfg.seed));
  model.label = init_params(label_encoder_config(mc, cfg.seed));

  const PreparedData data = prepare(table, model.stats);
  ContrastiveTask task = phase1_task(data, model.image, model.label);
  const TaskResult r = run_task(task, cfg, derive_seed(cfg.seed, "phase1"));
  model.phase1_best_val_loss = r.best_val_loss;
  model.phase1_best_epoch = r.best_epoch;
  for (const auto& rec : r.history) out.history.push_back({"1", rec});
  return out;
}

/// Phase 2: each listed modality aligned to the frozen image encoder,
/// independently and from its own initialization. Appends to `out`.
inline void train_phase2(const DatasetTable& table, TrainOutput& out, const ModelConfig& mc, const TrainConfig& cfg,
                         const std::vector<std::string>& modality_names) {
  TrainedModel& model = out.model;
  const PreparedData data = prepare(table, model.stats);
  const Matrix image_embeddings = encode_batch(model.image, data.images);
  for (const std::string& name : modality_names) {
    const std::size_t m = table.modality_index(name);
    const ModalityStats& ms = model.stats.modality(name);
    TabularEncoder te;
    te.modality = name;
    te.feature_names = ms.feature_names();
    te.params = init_params(tabular_encoder_config(mc, ms, cfg.seed));
    ContrastiveTask task = phase2_task(data, m, image_embeddings, te.params);
    const TaskResult r = run_task(task, cfg, derive_seed(cfg.seed, "phase2:" + name));
    te.best_val_loss = r.best_val_loss;
    te.best_epoch = r.best_epoch;
    for (const auto& rec : r.history) out.history.push_back({"2:" + name, rec});
    std::erase_if(model.tabular, [&](const TabularEncoder& t) { return t.modality == name; });
    model.tabular.push_back(std::move(te));
  }
}

/// Full protocol on a table whose samples already carry split tags.
inline TrainOutput train_model(const DatasetTable& table, const ModelConfig& mc, const TrainConfig& cfg) {
  if (table.indices(Split::train).empty() || table.indices(Split::val).empty()) {
    throw ConfigError("training needs non-empty train and val splits");
  }
  TrainOutput out = train_phase1(table, mc, cfg);
  std::vector<std::string> names;
  for (const auto& m : table.modalities) names.push_back(m.name);
  train_phase2(table, out, mc, cfg, names);
  return out;
}

/// Validation loss of phase 1 recomputed from stored parameters.
inline double phase1_val_loss(const TrainedModel& model, const DatasetTable& table, const TrainConfig& cfg) {
  const PreparedData data = prepare(table, model.stats);
  EncoderParams image = model.image, label = model.label;
  ContrastiveTask task = phase1_task(data, image, label);
  return evaluate_task_loss(task, {&image, &label}, data.val, cfg);
}

/// Validation loss of one phase-2 modality recomputed from stored parameters.
inline double phase2_val_loss(const TrainedModel& model, const DatasetTable& table, const TrainConfig& cfg,
                              const std::string& modality) {
  const TabularEncoder* te = model.find_tabular(modality);
  if (!te) throw ConfigError("no tabular encoder for modality '" + modality + "'");
  const PreparedData data = prepare(table, model.stats);
  const Matrix image_embeddings = encode_batch(model.image, data.images);
  EncoderParams params = te->params;
  ContrastiveTask task = phase2_task(data, table.modality_index(modality), image_embeddings, params);
  return evaluate_task_loss(task, {&params}, data.val, cfg);
}

}  // namespace protoclip

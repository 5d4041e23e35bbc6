#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "protoclip/attention.hpp"
#include "protoclip/checkpoint.hpp"
#include "protoclip/config.hpp"
#include "protoclip/data.hpp"
#include "protoclip/error.hpp"
#include "protoclip/inference.hpp"
#include "protoclip/training.hpp"

namespace protoclip::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

inline constexpr const char* kCheckpointFile = "checkpoint.pclp";
inline constexpr const char* kHistoryFile = "history.csv";
inline constexpr const char* kDatasetFile = "dataset.csv";
inline constexpr const char* kMaskFile = "signal_mask.csv";
inline constexpr const char* kSummaryFile = "eval_summary.json";
inline constexpr const char* kConfusionFile = "confusion.csv";
inline constexpr const char* kPredictionsFile = "predictions.csv";

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

namespace detail {

inline RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig cfg = g.config_path.empty() ? parse_run_config(nlohmann::json::object()) : load_run_config(g.config_path);
  if (g.seed) cfg.set_seed(*g.seed);
  if (!g.out_dir.empty()) cfg.output_dir = g.out_dir;
  if (cfg.dataset_path && !std::filesystem::exists(*cfg.dataset_path)) {
    throw ConfigError("config.dataset.path: '" + *cfg.dataset_path + "' does not exist");
  }
  return cfg;
}

inline std::filesystem::path ensure_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw ConfigError("cannot create output directory '" + dir + "': " + ec.message());
  return p;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot write '" + p.string() + "'");
  return os;
}

inline std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << std::fixed << v;
  return s.str();
}

inline std::size_t env_threads() {
  const char* v = std::getenv("PROTOCLIP_THREADS");
  if (!v || !*v) return 1;
  auto n = csv::parse_double(v);
  if (!n || *n < 1 || *n != std::floor(*n)) throw ConfigError("PROTOCLIP_THREADS must be a positive integer");
  return static_cast<std::size_t>(*n);
}

inline void write_history(std::ostream& os, const std::vector<HistoryRow>& history) {
  os << "epoch,phase,train_loss,val_loss,lr\n";
  for (const auto& h : history) {
    os << h.record.epoch << ',' << h.phase << ',' << csv::format_double(h.record.train_loss) << ','
       << csv::format_double(h.record.val_loss) << ',' << csv::format_double(h.record.lr) << '\n';
  }
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',' || c == '+') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

/// Input rows for inference, read with the checkpoint's schema.
inline DatasetTable load_inference_input(const std::string& path, const TrainedModel& model,
                                         const std::vector<std::string>& subset) {
  std::vector<ModalityDef> defs;
  for (const auto& name : subset) {
    if (name == kImageModality) continue;
    const ModalityStats& ms = model.stats.modality(name);
    const auto it = std::find_if(model.modalities.begin(), model.modalities.end(),
                                 [&](const ModalitySpec& m) { return m.name == name; });
    ModalityDef d{name, it->prefix, {}};
    for (const auto& c : ms.categorical) d.categorical[c.name] = c.vocabulary;
    defs.push_back(std::move(d));
  }
  csv::Table raw = csv::read_file(path);
  DatasetTable table = load_dataset(raw, defs, std::filesystem::path(path).parent_path(), LoadOptions{false});
  for (const auto& spec : table.modalities) {
    const ModalityStats& ms = model.stats.modality(spec.name);
    std::vector<std::string> numeric, categorical;
    for (const auto& c : ms.numeric) numeric.push_back(c.name);
    for (const auto& c : ms.categorical) categorical.push_back(c.name);
    if (spec.numeric_columns != numeric || spec.categorical_columns != categorical) {
      throw ConfigError("input columns of modality '" + spec.name + "' do not match the checkpoint schema");
    }
  }
  return table;
}

}  // namespace detail

inline int cmd_synth(const GlobalOptions& g, std::ostream& out) {
  const RunConfig cfg = detail::resolve_config(g);
  if (!cfg.uses_synthetic()) throw ConfigError("config: synth needs a 'synthetic' block, not 'dataset'");
  const SynthDataset ds = synth_generate(cfg.synthetic);
  const auto dir = detail::ensure_dir(cfg.output_dir);
  {
    auto os = detail::open_out(dir / kDatasetFile);
    save_dataset(os, ds.table);
  }
  {
    auto os = detail::open_out(dir / kMaskFile);
    write_signal_mask(os, ds.mask);
  }
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& s : ds.table.samples) ++counts[static_cast<int>(snap_class(s.label))];
  out << "synth: n=" << ds.table.samples.size() << " image_dim=" << ds.table.image_dim << " modalities=";
  for (std::size_t i = 0; i < cfg.synthetic.modalities.size(); ++i) {
    out << (i ? "," : "") << cfg.synthetic.modalities[i].name << ":" << cfg.synthetic.modalities[i].dim;
  }
  out << " classes CN=" << counts[0] << " MCI=" << counts[1] << " AD=" << counts[2] << '\n';
  return kExitOk;
}

inline int cmd_train(const GlobalOptions& g, std::optional<std::size_t> epochs, std::ostream& out) {
  RunConfig cfg = detail::resolve_config(g);
  if (epochs) cfg.train.epochs = *epochs;
  const DatasetTable table = make_splits(load_config_dataset(cfg), cfg.seed, cfg.fractions, cfg.balanced);
  const TrainOutput trained = train_model(table, cfg.model, cfg.train);

  Checkpoint ckpt;
  ckpt.config = run_config_json(cfg);
  ckpt.model = trained.model;
  const auto dir = detail::ensure_dir(cfg.output_dir);
  save_checkpoint(ckpt, (dir / kCheckpointFile).string());
  {
    auto os = detail::open_out(dir / kHistoryFile);
    detail::write_history(os, trained.history);
  }
  out << "train: phase 1 best val loss " << detail::fmt(trained.model.phase1_best_val_loss) << " (epoch "
      << trained.model.phase1_best_epoch << ")";
  for (const auto& t : trained.model.tabular)
    out << "; " << t.modality << " " << detail::fmt(t.best_val_loss) << " (epoch " << t.best_epoch << ")";
  out << "\ncheckpoint: " << (dir / kCheckpointFile).string() << '\n';
  return kExitOk;
}

inline void print_summary(std::ostream& out, const EvalSummary& s) {
  out << "configuration            AD-vs-CN            all labels\n";
  for (const auto& r : s.rows) {
    const MeanStd all = mean_std(r.all_labels), ext = mean_std(r.ad_vs_cn);
    std::string name = r.configuration;
    name.resize(std::max<std::size_t>(name.size(), 24), ' ');
    out << name << ' ' << detail::fmt(ext.mean, 3) << " +/- " << detail::fmt(ext.std, 3) << "   "
        << detail::fmt(all.mean, 3) << " +/- " << detail::fmt(all.std, 3) << '\n';
  }
}

inline int cmd_eval(const GlobalOptions& g, const std::string& checkpoint_path, std::ostream& out) {
  const RunConfig cfg = detail::resolve_config(g);
  const DatasetTable table = load_config_dataset(cfg);
  const std::size_t threads = detail::env_threads();
  EvalSummary summary;
  if (!checkpoint_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    const std::uint64_t split_seed = ckpt.config.value("seed", std::uint64_t{0});
    const DatasetTable split = make_splits(table, split_seed, cfg.fractions, cfg.balanced);
    summary.seeds = {split_seed};
    summary.search = cfg.search;
    summary.grid_size = cfg.grid_size;
    accumulate_run(summary, ckpt.model,
                   evaluate_model(ckpt.model, split, cfg.search, uniform_grid(cfg.grid_size), threads));
  } else {
    EvaluateOptions opt;
    opt.runs = cfg.eval_runs;
    opt.seeds = cfg.run_seeds();
    opt.fractions = cfg.fractions;
    opt.balanced = cfg.balanced;
    opt.search = cfg.search;
    opt.grid_size = cfg.grid_size;
    opt.threads = threads;
    summary = evaluate(table, cfg.model, cfg.train, opt);
  }
  const auto dir = detail::ensure_dir(cfg.output_dir);
  {
    auto os = detail::open_out(dir / kSummaryFile);
    os << summary_json(summary).dump(2) << '\n';
  }
  {
    auto os = detail::open_out(dir / kConfusionFile);
    write_confusion_csv(os, summary);
  }
  print_summary(out, summary);
  return kExitOk;
}

inline int cmd_infer(const GlobalOptions& g, const std::string& checkpoint_path, const std::string& input,
                     const std::string& modalities, const std::string& search, const std::string& output,
                     std::ostream& out, std::ostream& err) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const TrainedModel& model = ckpt.model;
  std::vector<std::string> subset = modalities.empty() ? available_modalities(model) : detail::split_list(modalities);
  check_subset(model, subset);
  const SearchMethod method = search_method_from_string(search);
  const std::size_t grid_size = ckpt.config.contains("eval") ? ckpt.config["eval"].value("grid_size", std::size_t{101}) : 101;

  const DatasetTable table = detail::load_inference_input(input, model, subset);
  std::vector<std::size_t> idx(table.samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Predictor predictor(model, uniform_grid(grid_size));
  const std::size_t threads = detail::env_threads();
  const auto preds = predictor.predict(table, idx, subset, method, threads);
  const auto other = predictor.predict(table, idx, subset,
                                       method == SearchMethod::ternary ? SearchMethod::exhaustive : SearchMethod::ternary,
                                       threads);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].y_hat == other[i].y_hat) {
      ++agree;
    } else {
      err << "search disagreement on " << preds[i].sample_id << ": " << to_string(method) << " y=" << preds[i].y_hat
          << " sim=" << preds[i].similarity << ", other y=" << other[i].y_hat << " sim=" << other[i].similarity << '\n';
    }
  }

  std::filesystem::path target = output.empty() ? detail::ensure_dir(g.out_dir.empty() ? "out" : g.out_dir) / kPredictionsFile
                                                 : std::filesystem::path(output);
  if (output == "-") {
    write_predictions_csv(out, preds);
  } else {
    auto os = detail::open_out(target);
    write_predictions_csv(os, preds);
  }
  const double rate = preds.empty() ? 1.0 : static_cast<double>(agree) / static_cast<double>(preds.size());
  err << "infer: " << preds.size() << " predictions, modalities " << join_modalities(subset)
      << "; ternary/exhaustive agreement " << detail::fmt(rate) << " (" << agree << "/" << preds.size() << ")\n";
  return kExitOk;
}

inline int cmd_attention(const GlobalOptions& g, const std::string& checkpoint_path, bool group_categorical,
                         std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  if (!ckpt.has_tabular()) throw ConfigError("no tabular gates present in '" + checkpoint_path + "'");
  const auto dir = detail::ensure_dir(g.out_dir.empty() ? "out" : g.out_dir);
  for (const auto& t : ckpt.model.tabular) {
    if (!t.params.gate) throw ConfigError("tabular encoder '" + t.modality + "' has no gate");
    const AttentionReport report = rank_features(*t.params.gate, t.feature_names, group_categorical);
    const auto path = dir / ("attention_" + t.modality + ".csv");
    auto os = detail::open_out(path);
    write_attention_csv(os, report);
    out << "attention: " << t.modality << " -> " << path.string() << " (top: " << report.entries.front().column
        << ")\n";
  }
  return kExitOk;
}

/// Entry point shared by the binary and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Image-anchored multimodal contrastive learning with tabular attention", "protoclip"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "override the global seed");
  app.add_option("--out", g.out_dir, "output directory");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset and its signal mask");
  auto* train = app.add_subcommand("train", "run both training phases and write the best checkpoint");
  std::optional<std::size_t> epochs;
  train->add_option("--epochs", epochs, "override train.epochs");
  auto* eval = app.add_subcommand("eval", "repeated split/train/test evaluation");
  std::string eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "evaluate this checkpoint instead of retraining")->check(CLI::ExistingFile);
  auto* infer = app.add_subcommand("infer", "predict spectrum labels for a CSV");
  std::string infer_ckpt, input, modalities, search = "exhaustive", output;
  infer->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  infer->add_option("--input", input, "input CSV")->required()->check(CLI::ExistingFile);
  infer->add_option("--modalities", modalities, "comma-separated subset (default: all)");
  infer->add_option("--search", search, "ternary or exhaustive")->check(CLI::IsMember({"ternary", "exhaustive"}));
  infer->add_option("--output", output, "predictions CSV path ('-' for stdout)");
  auto* attention = app.add_subcommand("attention", "export per-modality column rankings");
  std::string att_ckpt;
  bool group = false;
  attention->add_option("--checkpoint", att_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  attention->add_flag("--group-categorical", group, "collapse one-hot columns into their categorical name");

  for (auto* sub : {synth, train, eval, infer, attention}) {
    sub->add_option("--config", g.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", g.seed, "override the global seed");
    sub->add_option("--out", g.out_dir, "output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(g, out);
    if (*train) return cmd_train(g, epochs, out);
    if (*eval) return cmd_eval(g, eval_ckpt, out);
    if (*infer) return cmd_infer(g, infer_ckpt, input, modalities, search, output, out, err);
    if (*attention) return cmd_attention(g, att_ckpt, group, out);
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"protoclip"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace protoclip::cli

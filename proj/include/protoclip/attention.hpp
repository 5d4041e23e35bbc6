#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "protoclip/error.hpp"
#include "protoclip/matrix.hpp"
#include "protoclip/tape.hpp"

namespace protoclip {

/// Per-column gate logits for one tabular modality. The gate itself is
/// sigmoid(theta), so every column weight lies in (0, 1).
struct GateParams {
  Matrix theta;

  static GateParams zeros(std::size_t width) { return GateParams{Matrix(1, width)}; }
  std::size_t width() const noexcept { return theta.cols(); }
};

/// Separator between a categorical column name and its one-hot token.
inline constexpr char kOneHotSeparator = '=';

/// sigmoid(theta), kept strictly inside (0, 1): in double precision
/// sigmoid(z) rounds to exactly 1 once z exceeds about 37.
inline Matrix gate_weights(const GateParams& gate) {
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  constexpr double lo = std::numeric_limits<double>::denorm_min();
  Matrix w = gate.theta;
  for (double& v : w.data()) v = std::clamp(ops::sigmoid_scalar(v), lo, hi);
  return w;
}

/// x ⊙ sigmoid(theta), row by row. `theta` is a tape variable so it trains.
inline Var apply_gate(Var x, Var theta) {
  if (theta.value().rows() != 1 || x.value().cols() != theta.value().cols()) {
    throw ShapeError("apply_gate width mismatch: input " + x.value().shape_string() +
                     ", gate " + theta.value().shape_string());
  }
  return ops::mul_row(x, ops::sigmoid(theta));
}

inline Matrix apply_gate(const Matrix& x, const GateParams& gate) {
  Tape tape;
  return apply_gate(tape.constant(x), tape.constant(gate.theta)).value();
}

struct AttentionEntry {
  std::string column;
  double score = 0.0;
  std::size_t rank = 0;
};

struct AttentionReport {
  std::vector<AttentionEntry> entries;
};

/// Ranks columns by gate score, descending; ties go to the smaller name.
/// With `aggregate_one_hot`, columns named `cat=token` collapse into one
/// entry `cat` carrying the max score of the group.
inline AttentionReport rank_features(const GateParams& gate, const std::vector<std::string>& names,
                                     bool aggregate_one_hot = false) {
  if (names.size() != gate.width()) {
    throw ShapeError("rank_features: " + std::to_string(names.size()) + " names for " +
                     std::to_string(gate.width()) + " gate columns");
  }
  std::set<std::string> seen;
  for (const auto& n : names)
    if (!seen.insert(n).second) throw ConfigError("rank_features: duplicate column name '" + n + "'");

  const Matrix w = gate_weights(gate);
  AttentionReport report;
  if (aggregate_one_hot) {
    std::map<std::string, double> grouped;
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto cut = names[i].find(kOneHotSeparator);
      const std::string key = cut == std::string::npos ? names[i] : names[i].substr(0, cut);
      auto [it, fresh] = grouped.emplace(key, w[i]);
      if (!fresh) it->second = std::max(it->second, w[i]);
    }
    for (const auto& [name, score] : grouped) report.entries.push_back({name, score, 0});
  } else {
    for (std::size_t i = 0; i < names.size(); ++i) report.entries.push_back({names[i], w[i], 0});
  }
  std::sort(report.entries.begin(), report.entries.end(),
            [](const AttentionEntry& a, const AttentionEntry& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.column < b.column;
            });
  for (std::size_t i = 0; i < report.entries.size(); ++i) report.entries[i].rank = i + 1;
  return report;
}

/// `column,score` rows in rank order.
inline void write_attention_csv(std::ostream& os, const AttentionReport& report) {
  os << "column,score\n";
  os.precision(17);
  for (const auto& e : report.entries) os << e.column << ',' << e.score << '\n';
}

}  // namespace protoclip

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "protoclip/error.hpp"
#include "protoclip/matrix.hpp"
#include "protoclip/tape.hpp"

namespace protoclip {

enum class LossDirection { paper_one_sided, symmetric };

struct LossConfig {
  double temperature = 0.1;
  LossDirection direction = LossDirection::symmetric;
};

inline constexpr double kUnitNormTolerance = 1e-6;

/// S[i][j] = q_i · k_j for unit-norm rows.
inline Matrix similarity_matrix(const Matrix& q, const Matrix& k) {
  if (q.rows() != k.rows() || q.cols() != k.cols()) {
    throw ShapeError("similarity_matrix shape mismatch: " + q.shape_string() + " vs " +
                     k.shape_string());
  }
  for (const Matrix* m : {&q, &k}) {
    for (std::size_t i = 0; i < m->rows(); ++i) {
      const double n = norm2(m->row_span(i));
      if (std::abs(n - 1.0) > kUnitNormTolerance) {
        throw NumericError("similarity_matrix: row " + std::to_string(i) + " has norm " +
                           std::to_string(n) + ", expected unit norm");
      }
    }
  }
  return matmul_bt(q, k);
}

namespace detail {

inline void check_loss_inputs(const Matrix& q, const Matrix& k, const LossConfig& cfg) {
  if (!(cfg.temperature > 0.0)) {
    throw ConfigError("clip_loss temperature must be > 0, got " + std::to_string(cfg.temperature));
  }
  if (q.rows() == 0) throw ConfigError("clip_loss needs at least one pair");
  if (q.rows() != k.rows() || q.cols() != k.cols()) {
    throw ShapeError("clip_loss shape mismatch: " + q.shape_string() + " vs " + k.shape_string());
  }
}

// Row-wise log-sum-exp of logits; transposed walks columns instead.
inline std::vector<double> logsumexp(const Matrix& logits, bool transposed, bool stabilize) {
  const std::size_t n = logits.rows();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto at = [&](std::size_t j) { return transposed ? logits(j, i) : logits(i, j); };
    double m = 0.0;
    if (stabilize) {
      m = at(0);
      for (std::size_t j = 1; j < n; ++j) m = std::max(m, at(j));
    }
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(at(j) - m);
    out[i] = m + std::log(s);
  }
  return out;
}

}  // namespace detail

/// InfoNCE value from a precomputed similarity matrix (no tape).
inline double clip_loss_value(const Matrix& similarities, const LossConfig& cfg,
                              bool stabilize = true) {
  if (!(cfg.temperature > 0.0)) {
    throw ConfigError("clip_loss temperature must be > 0, got " + std::to_string(cfg.temperature));
  }
  const std::size_t n = similarities.rows();
  if (n == 0 || similarities.cols() != n) {
    throw ShapeError("clip_loss needs a non-empty square similarity matrix, got " +
                     similarities.shape_string());
  }
  Matrix logits = similarities;
  for (double& v : logits.data()) v /= cfg.temperature;
  auto one_direction = [&](bool transposed) {
    const auto lse = detail::logsumexp(logits, transposed, stabilize);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += lse[i] - logits(i, i);
    return total / static_cast<double>(n);
  };
  const double rows = one_direction(false);
  if (cfg.direction == LossDirection::paper_one_sided) return rows;
  return 0.5 * (rows + one_direction(true));
}

/// CLIP loss over matched rows (q_i, k_i), recorded on the tape as one op.
/// One-sided: mean_i −log softmax_j(q_i·k_j/τ)[i]; symmetric averages that
/// with the same quantity over columns.
inline Var clip_loss(Var q, Var k, const LossConfig& cfg) {
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  detail::check_loss_inputs(qv, kv, cfg);
  const std::size_t n = qv.rows();
  const double tau = cfg.temperature;

  Matrix logits = protoclip::matmul_bt(qv, kv);
  for (double& v : logits.data()) v /= tau;

  // dL/dlogits accumulated alongside the value.
  Matrix dlogits(n, n);
  const double weight = cfg.direction == LossDirection::symmetric ? 0.5 : 1.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  auto one_direction = [&](bool transposed) {
    const auto lse = detail::logsumexp(logits, transposed, true);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      total += lse[i] - logits(i, i);
      for (std::size_t j = 0; j < n; ++j) {
        const double l = transposed ? logits(j, i) : logits(i, j);
        double p = std::exp(l - lse[i]);
        if (i == j) p -= 1.0;
        (transposed ? dlogits(j, i) : dlogits(i, j)) += weight * inv_n * p;
      }
    }
    loss += weight * total * inv_n;
  };
  one_direction(false);
  if (cfg.direction == LossDirection::symmetric) one_direction(true);

  return q.tape->record(
      "clip_loss", Matrix(1, 1, loss), {q, k}, [q, k, tau, dlogits](Tape& tp, std::size_t self) {
        const double g = tp.upstream(self)[0];
        Matrix ds = dlogits;
        for (double& v : ds.data()) v *= g / tau;
        if (tp.requires_grad(q)) tp.accumulate(q, protoclip::matmul(ds, k.value()));
        if (tp.requires_grad(k)) tp.accumulate(k, matmul_at(ds, q.value()));
      });
}

}  // namespace protoclip

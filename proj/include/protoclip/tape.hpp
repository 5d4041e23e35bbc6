#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "protoclip/error.hpp"
#include "protoclip/matrix.hpp"

namespace protoclip {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
};

/// Single-owner record of the forward pass. Backward replays it in strict
/// reverse order and accumulates gradients into zero-initialized buffers.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = true) {
    return push("leaf", std::move(value), requires_grad, nullptr);
  }
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  /// Records an op result. `requires_grad` is inherited from the inputs.
  Var record(std::string_view op, Matrix value, std::initializer_list<Var> inputs,
             BackwardFn backward) {
    bool rg = false;
    for (const Var& v : inputs) {
      check_owner(v);
      rg = rg || nodes_[v.id].requires_grad;
    }
    return push(op, std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  const Matrix& value(Var v) const {
    check_owner(v);
    return nodes_[v.id].value;
  }
  bool requires_grad(Var v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
  }
  std::string_view op(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward root w.r.t. `v`; zeros if nothing flowed.
  Matrix grad(Var v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    if (n.grad.empty() && !n.value.empty()) return Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Accumulates `delta` into the gradient buffer of `v`, if it tracks one.
  void accumulate(Var v, const Matrix& delta) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    ensure_grad(n);
    if (!n.grad.same_shape(delta)) {
      throw ShapeError("gradient shape " + delta.shape_string() + " does not match value " +
                       n.value.shape_string());
    }
    auto g = n.grad.data();
    auto d = delta.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
  }
  /// Mutable gradient buffer, allocated at zero on first use.
  Matrix& grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    ensure_grad(n);
    return n.grad;
  }
  const Matrix& upstream(std::size_t self) {
    Node& n = nodes_[self];
    ensure_grad(n);
    return n.grad;
  }

  /// Reverse-mode sweep from a 1×1 root. Resets all accumulators first.
  void backward(Var root) {
    check_owner(root);
    const Matrix& rv = nodes_[root.id].value;
    if (rv.rows() != 1 || rv.cols() != 1) {
      throw ShapeError("backward root must be 1x1, got " + rv.shape_string());
    }
    for (Node& n : nodes_) n.grad = Matrix();
    backward_order_.clear();
    if (!nodes_[root.id].requires_grad) return;
    ensure_grad(nodes_[root.id]);
    nodes_[root.id].grad[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      backward_order_.push_back(i);
      n.backward(*this, i);
    }
  }

  /// Node ids whose backward rule ran during the last sweep, in run order.
  const std::vector<std::size_t>& backward_order() const noexcept { return backward_order_; }

 private:
  struct Node {
    std::string_view op;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(std::string_view op, Matrix value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{op, std::move(value), Matrix(), requires_grad, std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }
  void check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw Error("variable does not belong to this tape");
  }
  static void ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> backward_order_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

namespace ops {

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = protoclip::matmul(a.value(), b.value());
  return t.record("matmul", std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    if (tp.requires_grad(a)) tp.accumulate(a, matmul_bt(g, b.value()));
    if (tp.requires_grad(b)) tp.accumulate(b, matmul_at(a.value(), g));
  });
}

/// a · bᵀ; with unit rows this is the pairwise cosine matrix.
inline Var matmul_bt(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = protoclip::matmul_bt(a.value(), b.value());
  return t.record("matmul_bt", std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    if (tp.requires_grad(a)) tp.accumulate(a, protoclip::matmul(g, b.value()));
    if (tp.requires_grad(b)) tp.accumulate(b, matmul_at(g, a.value()));
  });
}

/// Adds a 1×d bias to every row of an N×d matrix.
inline Var add_bias(Var x, Var bias) {
  const Matrix& xv = x.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw ShapeError("add_bias shape mismatch: " + xv.shape_string() + " + " + bv.shape_string());
  }
  Matrix out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row_span(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv[j];
  }
  return x.tape->record("add_bias", std::move(out), {x, bias},
                        [x, bias](Tape& tp, std::size_t self) {
                          const Matrix& g = tp.upstream(self);
                          if (tp.requires_grad(x)) tp.accumulate(x, g);
                          if (tp.requires_grad(bias)) {
                            Matrix gb(1, g.cols());
                            for (std::size_t i = 0; i < g.rows(); ++i)
                              for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
                            tp.accumulate(bias, gb);
                          }
                        });
}

inline Var add(Var a, Var b) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("add shape mismatch: " + a.value().shape_string() + " + " +
                     b.value().shape_string());
  }
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("sub shape mismatch: " + a.value().shape_string() + " - " +
                     b.value().shape_string());
  }
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    tp.accumulate(a, g);
    if (tp.requires_grad(b)) {
      Matrix neg = g;
      for (double& v : neg.data()) v = -v;
      tp.accumulate(b, neg);
    }
  });
}

inline Var hadamard(Var a, Var b) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("hadamard shape mismatch: " + a.value().shape_string() + " * " +
                     b.value().shape_string());
  }
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record("hadamard", std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    if (tp.requires_grad(a)) {
      Matrix ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b.value()[i];
      tp.accumulate(a, ga);
    }
    if (tp.requires_grad(b)) {
      Matrix gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a.value()[i];
      tp.accumulate(b, gb);
    }
  });
}

/// Multiplies every row of an N×d matrix elementwise by a 1×d row.
inline Var mul_row(Var x, Var w) {
  const Matrix& xv = x.value();
  const Matrix& wv = w.value();
  if (wv.rows() != 1 || wv.cols() != xv.cols()) {
    throw ShapeError("mul_row width mismatch: " + xv.shape_string() + " vs " + wv.shape_string());
  }
  Matrix out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row_span(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] *= wv[j];
  }
  return x.tape->record("mul_row", std::move(out), {x, w}, [x, w](Tape& tp, std::size_t self) {
    const Matrix& g = tp.upstream(self);
    const Matrix& xv = x.value();
    const Matrix& wv = w.value();
    if (tp.requires_grad(x)) {
      Matrix gx = g;
      for (std::size_t i = 0; i < gx.rows(); ++i)
        for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) *= wv[j];
      tp.accumulate(x, gx);
    }
    if (tp.requires_grad(w)) {
      Matrix gw(1, wv.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gw[j] += g(i, j) * xv(i, j);
      tp.accumulate(w, gw);
    }
  });
}

inline Var scale(Var x, double c) {
  Matrix out = x.value();
  for (double& v : out.data()) v *= c;
  return x.tape->record("scale", std::move(out), {x}, [x, c](Tape& tp, std::size_t self) {
    Matrix g = tp.upstream(self);
    for (double& v : g.data()) v *= c;
    tp.accumulate(x, g);
  });
}

/// Sum of all entries as a 1×1 value.
inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record("sum", Matrix(1, 1, s), {x}, [x](Tape& tp, std::size_t self) {
    const double g = tp.upstream(self)[0];
    tp.accumulate(x, Matrix(x.value().rows(), x.value().cols(), g));
  });
}

enum class Activation { relu, sigmoid };

inline double sigmoid_scalar(double z) {
  // Split on sign so exp never overflows.
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Var activation(Var x, Activation kind) {
  require_finite(x.value(), "activation");
  Matrix out = x.value();
  if (kind == Activation::relu) {
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return x.tape->record("relu", std::move(out), {x}, [x](Tape& tp, std::size_t self) {
      Matrix g = tp.upstream(self);
      const Matrix& xv = x.value();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(xv[i] > 0.0)) g[i] = 0.0;
      tp.accumulate(x, g);
    });
  }
  for (double& v : out.data()) v = sigmoid_scalar(v);
  return x.tape->record("sigmoid", out, {x}, [x, out](Tape& tp, std::size_t self) {
    Matrix g = tp.upstream(self);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= out[i] * (1.0 - out[i]);
    tp.accumulate(x, g);
  });
}

inline Var relu(Var x) { return activation(x, Activation::relu); }
inline Var sigmoid(Var x) { return activation(x, Activation::sigmoid); }

/// Scales every row to unit Euclidean norm.
inline Var l2_normalize_rows(Var x) {
  const Matrix& xv = x.value();
  require_finite(xv, "l2_normalize");
  Matrix out = xv;
  std::vector<double> norms(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    const double n = norm2(xv.row_span(i));
    if (n <= kNormEpsilon) {
      throw NumericError("l2_normalize: near-zero norm " + std::to_string(n) + " in row " +
                         std::to_string(i));
    }
    norms[i] = n;
    for (double& v : out.row_span(i)) v /= n;
  }
  return x.tape->record(
      "l2_normalize", out, {x}, [x, out, norms](Tape& tp, std::size_t self) {
        Matrix g = tp.upstream(self);
        // d(v/|v|) = (g - y (y·g)) / |v|
        for (std::size_t i = 0; i < g.rows(); ++i) {
          auto gi = g.row_span(i);
          auto yi = out.row_span(i);
          const double yg = dot(yi, gi);
          for (std::size_t j = 0; j < gi.size(); ++j) gi[j] = (gi[j] - yi[j] * yg) / norms[i];
        }
        tp.accumulate(x, g);
      });
}

/// Height × width × channels of one image stored channel-last in a row.
struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t flat() const noexcept { return height * width * channels; }
};

/// 3×3 convolution, stride 1, zero padding 1. `kernel` is (9·Cin)×Cout with
/// rows ordered (dy, dx, cin); `bias` is 1×Cout. Each input row is one image.
inline Var conv3x3_same(Var x, Var kernel, Var bias, ImageShape in) {
  const Matrix& xv = x.value();
  const Matrix& kv = kernel.value();
  const Matrix& bv = bias.value();
  if (xv.cols() != in.flat()) {
    throw ShapeError("conv input width " + std::to_string(xv.cols()) + " does not match " +
                     std::to_string(in.height) + "x" + std::to_string(in.width) + "x" +
                     std::to_string(in.channels));
  }
  if (kv.rows() != 9 * in.channels || bv.rows() != 1 || bv.cols() != kv.cols()) {
    throw ShapeError("conv kernel " + kv.shape_string() + " / bias " + bv.shape_string() +
                     " do not fit " + std::to_string(in.channels) + " input channels");
  }
  const std::size_t H = in.height, W = in.width, C = in.channels, K = kv.cols();
  Matrix out(xv.rows(), H * W * K);
  for (std::size_t n = 0; n < xv.rows(); ++n) {
    auto src = xv.row_span(n);
    auto dst = out.row_span(n);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t xx = 0; xx < W; ++xx) {
        double* o = dst.data() + (y * W + xx) * K;
        for (std::size_t k = 0; k < K; ++k) o[k] = bv[k];
        for (std::size_t dy = 0; dy < 3; ++dy) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t dx = 0; dx < 3; ++dx) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + dx) - 1;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
            const double* s = src.data() + (static_cast<std::size_t>(sy) * W + sx) * C;
            for (std::size_t c = 0; c < C; ++c) {
              const double sv = s[c];
              if (sv == 0.0) continue;
              auto krow = kv.row_span((dy * 3 + dx) * C + c);
              for (std::size_t k = 0; k < K; ++k) o[k] += sv * krow[k];
            }
          }
        }
      }
    }
  }
  return x.tape->record(
      "conv3x3", std::move(out), {x, kernel, bias}, [x, kernel, bias, in](Tape& tp, std::size_t self) {
        const Matrix& g = tp.upstream(self);
        const Matrix& xv = x.value();
        const Matrix& kv = kernel.value();
        const std::size_t H = in.height, W = in.width, C = in.channels, K = kv.cols();
        const bool need_x = tp.requires_grad(x);
        const bool need_k = tp.requires_grad(kernel);
        Matrix gx(xv.rows(), xv.cols());
        Matrix gk(kv.rows(), kv.cols());
        Matrix gb(1, K);
        for (std::size_t n = 0; n < xv.rows(); ++n) {
          auto src = xv.row_span(n);
          auto gsrc = gx.row_span(n);
          auto up = g.row_span(n);
          for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t xx = 0; xx < W; ++xx) {
              const double* go = up.data() + (y * W + xx) * K;
              for (std::size_t k = 0; k < K; ++k) gb[k] += go[k];
              for (std::size_t dy = 0; dy < 3; ++dy) {
                const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - 1;
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t dx = 0; dx < 3; ++dx) {
                  const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + dx) - 1;
                  if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                  const std::size_t base = (static_cast<std::size_t>(sy) * W + sx) * C;
                  for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t kr = (dy * 3 + dx) * C + c;
                    auto krow = kv.row_span(kr);
                    if (need_k) {
                      auto gkrow = gk.row_span(kr);
                      const double sv = src[base + c];
                      for (std::size_t k = 0; k < K; ++k) gkrow[k] += sv * go[k];
                    }
                    if (need_x) {
                      double acc = 0.0;
                      for (std::size_t k = 0; k < K; ++k) acc += krow[k] * go[k];
                      gsrc[base + c] += acc;
                    }
                  }
                }
              }
            }
          }
        }
        if (need_x) tp.accumulate(x, gx);
        if (need_k) tp.accumulate(kernel, gk);
        tp.accumulate(bias, gb);
      });
}

/// 2×2 max pooling with stride 2 over channel-last images; odd edges are dropped.
inline Var maxpool2x2(Var x, ImageShape in) {
  const Matrix& xv = x.value();
  if (xv.cols() != in.flat()) {
    throw ShapeError("maxpool input width " + std::to_string(xv.cols()) + " does not match " +
                     std::to_string(in.flat()));
  }
  const std::size_t H = in.height / 2, W = in.width / 2, C = in.channels;
  Matrix out(xv.rows(), H * W * C);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t n = 0; n < xv.rows(); ++n) {
    auto src = xv.row_span(n);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        for (std::size_t c = 0; c < C; ++c) {
          std::size_t best = ((2 * y) * in.width + 2 * xx) * C + c;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((2 * y + dy) * in.width + 2 * xx + dx) * C + c;
              if (src[idx] > src[best]) best = idx;
            }
          const std::size_t o = (y * W + xx) * C + c;
          out(n, o) = src[best];
          argmax[n * H * W * C + o] = best;
        }
  }
  return x.tape->record("maxpool2x2", std::move(out), {x},
                        [x, argmax, per = H * W * C](Tape& tp, std::size_t self) {
                          const Matrix& g = tp.upstream(self);
                          Matrix gx(x.value().rows(), x.value().cols());
                          for (std::size_t n = 0; n < g.rows(); ++n)
                            for (std::size_t o = 0; o < per; ++o)
                              gx(n, argmax[n * per + o]) += g(n, o);
                          tp.accumulate(x, gx);
                        });
}

}  // namespace ops

/// Scalar function of a list of parameter matrices, built on a tape.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares tape gradients with central differences. Returns the max over all
/// parameter entries of |analytic − numeric| / max(1, |numeric|).
inline double grad_check(const ScalarFn& f, const std::vector<Matrix>& params, double eps = 1e-6) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ConfigError("grad_check eps must lie in [1e-7, 1e-3], got " + std::to_string(eps));
  }
  auto evaluate = [&](const std::vector<Matrix>& ps, std::vector<Matrix>* grads) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(ps.size());
    for (const Matrix& p : ps) vars.push_back(tape.leaf(p));
    Var out = f(tape, vars);
    if (out.value().size() != 1) throw ShapeError("grad_check function must return 1x1");
    if (grads) {
      tape.backward(out);
      for (Var v : vars) grads->push_back(tape.grad(v));
    }
    return out.value()[0];
  };

  std::vector<Matrix> analytic;
  const double base = evaluate(params, &analytic);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite value at the base point");

  double worst = 0.0;
  std::vector<Matrix> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      probe[p][i] = orig + eps;
      const double up = evaluate(probe, nullptr);
      probe[p][i] = orig - eps;
      const double down = evaluate(probe, nullptr);
      probe[p][i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite evaluation perturbing parameter " +
                           std::to_string(p) + " entry " + std::to_string(i));
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[p][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace protoclip

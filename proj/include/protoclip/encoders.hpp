#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "protoclip/attention.hpp"
#include "protoclip/error.hpp"
#include "protoclip/matrix.hpp"
#include "protoclip/tape.hpp"

namespace protoclip {

enum class EncoderKind { image_cnn, image_mlp, tabular_mlp, label_mlp };

inline std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::image_cnn: return "image_cnn";
    case EncoderKind::image_mlp: return "image_mlp";
    case EncoderKind::tabular_mlp: return "tabular_mlp";
    case EncoderKind::label_mlp: return "label_mlp";
  }
  return "unknown";
}

inline EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "image_cnn") return EncoderKind::image_cnn;
  if (s == "image_mlp") return EncoderKind::image_mlp;
  if (s == "tabular_mlp") return EncoderKind::tabular_mlp;
  if (s == "label_mlp") return EncoderKind::label_mlp;
  throw ConfigError("unknown encoder kind '" + s + "'");
}

struct EncoderConfig {
  EncoderKind kind = EncoderKind::tabular_mlp;
  /// Flat input width. For image_cnn it must equal image.flat().
  std::size_t input_dim = 0;
  ops::ImageShape image{};
  /// Output channels of each conv block (image_cnn only).
  std::vector<std::size_t> conv_channels{8, 16};
  /// Dense hidden widths before the linear projection.
  std::vector<std::size_t> hidden_dims;
  std::size_t projection_dim = 128;
  std::uint64_t seed = 0;

  bool is_mlp() const noexcept { return kind != EncoderKind::image_cnn; }

  void validate() const {
    if (projection_dim < 2) throw ConfigError("projection_dim must be >= 2");
    if (input_dim == 0) throw ConfigError("encoder input_dim must be positive");
    if (is_mlp() && hidden_dims.empty()) {
      throw ConfigError(to_string(kind) + " encoder needs at least one hidden layer");
    }
    for (std::size_t h : hidden_dims)
      if (h == 0) throw ConfigError("hidden_dims entries must be positive");
    if (kind == EncoderKind::label_mlp && input_dim != 1) {
      throw ConfigError("label_mlp input_dim must be 1");
    }
    if (kind == EncoderKind::image_cnn) {
      if (image.flat() != input_dim) {
        throw ConfigError("image_cnn input_dim " + std::to_string(input_dim) +
                          " does not equal height*width*channels " + std::to_string(image.flat()));
      }
      if (conv_channels.empty()) throw ConfigError("image_cnn needs at least one conv block");
      std::size_t h = image.height, w = image.width;
      for (std::size_t c : conv_channels) {
        if (c == 0) throw ConfigError("conv_channels entries must be positive");
        h /= 2;
        w /= 2;
      }
      if (h == 0 || w == 0) throw ConfigError("image too small for the number of pooling blocks");
    }
  }

  /// Flattened width entering the first dense layer.
  std::size_t dense_input_dim() const {
    if (kind != EncoderKind::image_cnn) return input_dim;
    std::size_t h = image.height, w = image.width;
    for (std::size_t i = 0; i < conv_channels.size(); ++i) {
      h /= 2;
      w /= 2;
    }
    return h * w * conv_channels.back();
  }
};

struct EncoderParams {
  EncoderConfig config;
  std::optional<GateParams> gate;
  std::vector<Matrix> conv_kernels;
  std::vector<Matrix> conv_biases;
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;

  /// Every trainable tensor in a fixed order: gate, conv blocks, dense layers.
  std::vector<Matrix*> tensors() {
    std::vector<Matrix*> out;
    if (gate) out.push_back(&gate->theta);
    for (std::size_t i = 0; i < conv_kernels.size(); ++i) {
      out.push_back(&conv_kernels[i]);
      out.push_back(&conv_biases[i]);
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back(&weights[i]);
      out.push_back(&biases[i]);
    }
    return out;
  }
  std::vector<const Matrix*> tensors() const {
    auto mut = const_cast<EncoderParams*>(this)->tensors();
    return {mut.begin(), mut.end()};
  }
  /// Names parallel to tensors().
  std::vector<std::string> tensor_names() const {
    std::vector<std::string> out;
    if (gate) out.emplace_back("gate");
    for (std::size_t i = 0; i < conv_kernels.size(); ++i) {
      out.push_back("conv" + std::to_string(i) + ".kernel");
      out.push_back("conv" + std::to_string(i) + ".bias");
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back("dense" + std::to_string(i) + ".weight");
      out.push_back("dense" + std::to_string(i) + ".bias");
    }
    return out;
  }

  /// Builds the layer skeleton for `config` with all tensors zero.
  static EncoderParams zeros(const EncoderConfig& config) {
    config.validate();
    EncoderParams p;
    p.config = config;
    if (config.kind == EncoderKind::tabular_mlp) p.gate = GateParams::zeros(config.input_dim);
    if (config.kind == EncoderKind::image_cnn) {
      std::size_t cin = config.image.channels;
      for (std::size_t c : config.conv_channels) {
        p.conv_kernels.emplace_back(9 * cin, c);
        p.conv_biases.emplace_back(1, c);
        cin = c;
      }
    }
    std::size_t in = config.dense_input_dim();
    for (std::size_t h : config.hidden_dims) {
      p.weights.emplace_back(in, h);
      p.biases.emplace_back(1, h);
      in = h;
    }
    p.weights.emplace_back(in, config.projection_dim);
    p.biases.emplace_back(1, config.projection_dim);
    return p;
  }
};

inline double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

/// Glorot-uniform weights from the config seed, zero biases, zero gate logits.
/// Label encoders also draw biases from the Glorot range: with zero biases an
/// MLP maps y = 0 to the zero vector, which has no direction to normalize.
inline EncoderParams init_params(const EncoderConfig& config) {
  EncoderParams p = EncoderParams::zeros(config);
  std::mt19937_64 rng(config.seed);
  auto fill = [&rng](Matrix& m, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : m.data()) v = dist(rng);
  };
  std::size_t cin = config.image.channels;
  for (std::size_t i = 0; i < p.conv_kernels.size(); ++i) {
    const std::size_t cout = p.conv_kernels[i].cols();
    fill(p.conv_kernels[i], glorot_bound(9 * cin, 9 * cout));
    cin = cout;
  }
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    const double bound = glorot_bound(p.weights[i].rows(), p.weights[i].cols());
    fill(p.weights[i], bound);
    if (config.kind == EncoderKind::label_mlp) fill(p.biases[i], bound);
  }
  return p;
}

/// Encoder parameters placed on a tape.
struct BoundEncoder {
  const EncoderParams* params = nullptr;
  std::vector<Var> vars;
};

inline BoundEncoder bind(Tape& tape, const EncoderParams& params, bool trainable) {
  BoundEncoder b{&params, {}};
  for (const Matrix* m : params.tensors()) b.vars.push_back(tape.leaf(*m, trainable));
  return b;
}

/// Forward pass over a batch (one sample per row); returns unit-norm rows.
inline Var forward(const BoundEncoder& enc, Var input) {
  const EncoderParams& p = *enc.params;
  const EncoderConfig& cfg = p.config;
  if (input.value().cols() != cfg.input_dim) {
    throw ShapeError(to_string(cfg.kind) + " expects input width " + std::to_string(cfg.input_dim) +
                     ", got " + input.value().shape_string());
  }
  std::size_t slot = 0;
  Var h = input;
  if (p.gate) h = apply_gate(h, enc.vars[slot++]);
  if (cfg.kind == EncoderKind::image_cnn) {
    ops::ImageShape shape = cfg.image;
    for (std::size_t i = 0; i < p.conv_kernels.size(); ++i) {
      Var k = enc.vars[slot++];
      Var b = enc.vars[slot++];
      h = ops::relu(ops::conv3x3_same(h, k, b, shape));
      shape.channels = p.conv_kernels[i].cols();
      h = ops::maxpool2x2(h, shape);
      shape.height /= 2;
      shape.width /= 2;
    }
  }
  const std::size_t layers = p.weights.size();
  for (std::size_t i = 0; i < layers; ++i) {
    Var w = enc.vars[slot++];
    Var b = enc.vars[slot++];
    h = ops::add_bias(ops::matmul(h, w), b);
    if (i + 1 < layers) h = ops::relu(h);
  }
  return ops::l2_normalize_rows(h);
}

/// A unit-norm point in the shared embedding space.
struct Embedding {
  Matrix vector;

  std::size_t dim() const noexcept { return vector.cols(); }
};

/// Batch inference: one unit-norm embedding per input row.
inline Matrix encode_batch(const EncoderParams& params, const Matrix& inputs) {
  Tape tape;
  BoundEncoder b = bind(tape, params, false);
  return forward(b, tape.constant(inputs)).value();
}

inline Embedding encode(const EncoderParams& params, const Matrix& input) {
  if (input.rows() != 1) throw ShapeError("encode expects a single 1xd row, got " + input.shape_string());
  return Embedding{encode_batch(params, input)};
}

inline void check_label_value(double y) {
  if (!(y >= 0.0 && y <= 1.0)) {
    throw ConfigError("label value " + std::to_string(y) + " lies outside [0, 1]");
  }
}

inline Matrix label_inputs(const std::vector<double>& ys) {
  for (double y : ys) check_label_value(y);
  return Matrix(ys.size(), 1, ys);
}

inline Embedding encode_label(const EncoderParams& params, double y) {
  if (params.config.kind != EncoderKind::label_mlp) throw ConfigError("encode_label needs a label_mlp encoder");
  return Embedding{encode_batch(params, label_inputs({y}))};
}

}  // namespace protoclip

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "protoclip/encoders.hpp"
#include "test_util.hpp"

using namespace protoclip;
using protoclip::testing::random_matrix;

namespace {

EncoderConfig tabular(std::size_t in, std::vector<std::size_t> hidden, std::size_t proj, std::uint64_t seed) {
  EncoderConfig c;
  c.kind = EncoderKind::tabular_mlp;
  c.input_dim = in;
  c.hidden_dims = std::move(hidden);
  c.projection_dim = proj;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(InitParams, SameSeedIsBitwiseIdentical) {
  const auto a = init_params(tabular(10, {16}, 128, 42));
  const auto b = init_params(tabular(10, {16}, 128, 42));
  ASSERT_EQ(a.weights.size(), b.weights.size());
  for (std::size_t i = 0; i < a.weights.size(); ++i) EXPECT_EQ(a.weights[i], b.weights[i]);
  const auto c = init_params(tabular(10, {16}, 128, 43));
  EXPECT_NE(a.weights[0], c.weights[0]);
}

TEST(InitParams, ShapeChain) {
  const auto p = init_params(tabular(10, {16}, 128, 1));
  ASSERT_EQ(p.weights.size(), 2u);
  EXPECT_EQ(p.weights[0].shape_string(), "10x16");
  EXPECT_EQ(p.weights[1].shape_string(), "16x128");
  EXPECT_EQ(p.biases[0].shape_string(), "1x16");
  EXPECT_EQ(p.biases[1].shape_string(), "1x128");
}

TEST(InitParams, GlorotBound) {
  EXPECT_NEAR(glorot_bound(10, 16), 0.4803844614152614, 1e-15);
  const auto p = init_params(tabular(10, {16}, 128, 7));
  for (double w : p.weights[0].data()) EXPECT_LE(std::abs(w), 0.4803844614152614);
  for (double w : p.weights[1].data()) EXPECT_LE(std::abs(w), glorot_bound(16, 128));
}

TEST(InitParams, TabularBiasesAndGateStartAtZero) {
  const auto p = init_params(tabular(6, {8}, 4, 3));
  ASSERT_TRUE(p.gate.has_value());
  EXPECT_EQ(p.gate->theta, Matrix(1, 6));
  for (const auto& b : p.biases) EXPECT_EQ(b, Matrix(1, b.cols()));
}

TEST(EncoderConfig, Validation) {
  EXPECT_THROW(init_params(tabular(6, {}, 4, 0)), ConfigError);
  EXPECT_THROW(init_params(tabular(6, {8}, 1, 0)), ConfigError);
  EXPECT_THROW(init_params(tabular(0, {8}, 4, 0)), ConfigError);
  EncoderConfig label;
  label.kind = EncoderKind::label_mlp;
  label.input_dim = 2;
  label.hidden_dims = {4};
  EXPECT_THROW(init_params(label), ConfigError);
}

TEST(EncoderKind, StringRoundTrip) {
  for (auto k : {EncoderKind::image_cnn, EncoderKind::image_mlp, EncoderKind::tabular_mlp, EncoderKind::label_mlp})
    EXPECT_EQ(encoder_kind_from_string(to_string(k)), k);
  EXPECT_THROW(encoder_kind_from_string("resnet"), ConfigError);
}

TEST(Encode, OutputIsUnitNorm) {
  std::mt19937_64 rng(11);
  const auto p = init_params(tabular(9, {32, 16}, 128, 5));
  for (int trial = 0; trial < 20; ++trial) {
    const Embedding e = encode(p, random_matrix(1, 9, rng, -3, 3));
    EXPECT_EQ(e.dim(), 128u);
    EXPECT_NEAR(norm2(e.vector.data()), 1.0, 1e-9);
  }
}

TEST(Encode, SingleLinearIdentityLayerReducesToNormalize) {
  EncoderParams p;
  p.config.kind = EncoderKind::image_mlp;
  p.config.input_dim = 2;
  p.config.projection_dim = 2;
  p.weights = {Matrix::identity(2)};
  p.biases = {Matrix(1, 2)};
  const Embedding e = encode(p, Matrix{{3, 4}});
  EXPECT_NEAR(e.vector[0], 0.6, 1e-15);
  EXPECT_NEAR(e.vector[1], 0.8, 1e-15);
}

TEST(Encode, Pure) {
  std::mt19937_64 rng(12);
  const auto p = init_params(tabular(5, {7}, 6, 9));
  const Matrix x = random_matrix(1, 5, rng);
  EXPECT_EQ(encode(p, x).vector, encode(p, x).vector);
}

TEST(Encode, ShapeMismatch) {
  const auto p = init_params(tabular(5, {7}, 6, 9));
  EXPECT_THROW(encode(p, Matrix(1, 4)), ShapeError);
  EXPECT_THROW(encode(p, Matrix(2, 5)), ShapeError);
}

TEST(Encode, BatchRowsMatchSingleEncode) {
  std::mt19937_64 rng(13);
  const auto p = init_params(tabular(5, {7}, 6, 9));
  const Matrix x = random_matrix(4, 5, rng);
  const Matrix batch = encode_batch(p, x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(batch.row_copy(i), encode(p, x.row_copy(i)).vector);
}

TEST(Encode, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  auto p = init_params(tabular(5, {6}, 4, 21));
  p.gate->theta = random_matrix(1, 5, rng);
  for (auto& b : p.biases) b = random_matrix(1, b.cols(), rng);
  const Matrix x = random_matrix(3, 5, rng);
  const Matrix target = random_matrix(3, 4, rng);
  std::vector<Matrix> params;
  for (const Matrix* m : p.tensors()) params.push_back(*m);
  const double err = grad_check(
      [&](Tape& tape, std::span<const Var> vars) {
        BoundEncoder b{&p, {vars.begin(), vars.end()}};
        Var d = ops::sub(forward(b, tape.constant(x)), tape.constant(target));
        return ops::sum(ops::hadamard(d, d));
      },
      params);
  EXPECT_LT(err, 1e-5);
}

TEST(Encode, ImageCnnDefaultShapes) {
  EncoderConfig c;
  c.kind = EncoderKind::image_cnn;
  c.image = {32, 32, 1};
  c.input_dim = 32 * 32;
  c.hidden_dims = {};
  c.projection_dim = 128;
  c.seed = 4;
  const auto p = init_params(c);
  EXPECT_EQ(c.dense_input_dim(), 16u * 8u * 8u);
  ASSERT_EQ(p.conv_kernels.size(), 2u);
  EXPECT_EQ(p.conv_kernels[0].shape_string(), "9x8");
  EXPECT_EQ(p.conv_kernels[1].shape_string(), "72x16");
  ASSERT_EQ(p.weights.size(), 1u);
  EXPECT_EQ(p.weights[0].shape_string(), "1024x128");
  std::mt19937_64 rng(15);
  const Embedding e = encode(p, random_matrix(1, 1024, rng));
  EXPECT_EQ(e.dim(), 128u);
  EXPECT_NEAR(norm2(e.vector.data()), 1.0, 1e-9);
}

TEST(Encode, ImageCnnGradients) {
  EncoderConfig c;
  c.kind = EncoderKind::image_cnn;
  c.image = {4, 4, 1};
  c.input_dim = 16;
  c.conv_channels = {2};
  c.hidden_dims = {3};
  c.projection_dim = 3;
  c.seed = 8;
  const auto p = init_params(c);
  std::mt19937_64 rng(16);
  const Matrix x = random_matrix(2, 16, rng);
  std::vector<Matrix> params;
  for (const Matrix* m : p.tensors()) params.push_back(*m);
  const double err = grad_check(
      [&](Tape& tape, std::span<const Var> vars) {
        BoundEncoder b{&p, {vars.begin(), vars.end()}};
        Var y = forward(b, tape.constant(x));
        return ops::sum(ops::hadamard(y, tape.constant(Matrix{{0.3, -0.5, 0.9}, {1.1, 0.2, -0.4}})));
      },
      params);
  EXPECT_LT(err, 1e-5);
}

TEST(EncodeLabel, UnitNormDeterministicAndRangeChecked) {
  EncoderConfig c;
  c.kind = EncoderKind::label_mlp;
  c.input_dim = 1;
  c.hidden_dims = {16};
  c.projection_dim = 8;
  c.seed = 3;
  const auto p = init_params(c);
  for (double y : {0.0, 0.25, 0.5, 1.0}) {
    const Embedding e = encode_label(p, y);
    EXPECT_NEAR(norm2(e.vector.data()), 1.0, 1e-9);
    EXPECT_EQ(e.vector, encode_label(p, y).vector);
  }
  EXPECT_THROW(encode_label(p, -0.01), ConfigError);
  EXPECT_THROW(encode_label(p, 1.01), ConfigError);
  EXPECT_THROW(encode_label(p, std::nan("")), ConfigError);
}

TEST(EncodeLabel, ContinuousInY) {
  EncoderConfig c;
  c.kind = EncoderKind::label_mlp;
  c.input_dim = 1;
  c.hidden_dims = {16};
  c.projection_dim = 8;
  c.seed = 5;
  const auto p = init_params(c);
  const Matrix a = encode_label(p, 0.5).vector, b = encode_label(p, 0.5 + 1e-7).vector;
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  EXPECT_LT(d, 1e-4);
}

TEST(EncodeLabel, RequiresLabelEncoder) {
  const auto p = init_params(tabular(1, {4}, 4, 0));
  EXPECT_THROW(encode_label(p, 0.5), ConfigError);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "protoclip/contrastive.hpp"
#include "test_util.hpp"

using namespace protoclip;
using protoclip::testing::random_matrix;
using protoclip::testing::unit_rows;

namespace {

LossConfig cfg(double tau, LossDirection dir = LossDirection::symmetric) { return LossConfig{tau, dir}; }

double tape_loss(const Matrix& q, const Matrix& k, const LossConfig& c) {
  Tape t;
  return clip_loss(t.constant(q), t.constant(k), c).value()[0];
}

const Matrix kOrtho2{{1, 0}, {0, 1}};

}  // namespace

TEST(SimilarityMatrix, OrthonormalGivesIdentity) {
  const Matrix q = Matrix::identity(4);
  EXPECT_EQ(similarity_matrix(q, q), Matrix::identity(4));
}

TEST(SimilarityMatrix, SinglePair) {
  std::mt19937_64 rng(1);
  const Matrix q = unit_rows(1, 5, rng), k = unit_rows(1, 5, rng);
  const Matrix s = similarity_matrix(q, k);
  ASSERT_EQ(s.shape_string(), "1x1");
  EXPECT_EQ(s[0], dot(q.data(), k.data()));
}

TEST(SimilarityMatrix, MatchesNaiveDotProducts) {
  std::mt19937_64 rng(2);
  const Matrix q = unit_rows(5, 8, rng), k = unit_rows(5, 8, rng);
  const Matrix s = similarity_matrix(q, k);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double d = 0.0;
      for (std::size_t t = 0; t < 8; ++t) d += q(i, t) * k(j, t);
      EXPECT_NEAR(s(i, j), d, 1e-12);
      EXPECT_LE(std::abs(s(i, j)), 1.0 + 1e-9);
    }
}

TEST(SimilarityMatrix, Errors) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(similarity_matrix(unit_rows(2, 3, rng), unit_rows(3, 3, rng)), ShapeError);
  EXPECT_THROW(similarity_matrix(Matrix{{1, 1}}, Matrix{{1, 0}}), NumericError);
}

TEST(ClipLoss, SinglePairIsExactlyZero) {
  std::mt19937_64 rng(4);
  const Matrix q = unit_rows(1, 6, rng), k = unit_rows(1, 6, rng);
  for (auto dir : {LossDirection::symmetric, LossDirection::paper_one_sided}) {
    EXPECT_EQ(tape_loss(q, k, cfg(0.1, dir)), 0.0);
    EXPECT_EQ(clip_loss_value(similarity_matrix(q, k), cfg(0.1, dir)), 0.0);
  }
}

TEST(ClipLoss, OrthonormalPairTauOne) {
  for (auto dir : {LossDirection::symmetric, LossDirection::paper_one_sided}) {
    EXPECT_NEAR(tape_loss(kOrtho2, kOrtho2, cfg(1.0, dir)), 0.31326168751822286, 1e-12);
  }
}

TEST(ClipLoss, OrthonormalPairTauPointOne) {
  for (auto dir : {LossDirection::symmetric, LossDirection::paper_one_sided}) {
    EXPECT_NEAR(tape_loss(kOrtho2, kOrtho2, cfg(0.1, dir)), 4.5398899216870535e-05, 1e-15);
  }
}

TEST(ClipLoss, DefaultTemperatureAndDirection) {
  const LossConfig c;
  EXPECT_EQ(c.temperature, 0.1);
  EXPECT_EQ(c.direction, LossDirection::symmetric);
}

TEST(ClipLoss, Errors) {
  EXPECT_THROW(tape_loss(kOrtho2, kOrtho2, cfg(0.0)), ConfigError);
  EXPECT_THROW(tape_loss(kOrtho2, kOrtho2, cfg(-1.0)), ConfigError);
  EXPECT_THROW(tape_loss(Matrix(0, 2), Matrix(0, 2), cfg(0.1)), ConfigError);
  EXPECT_THROW(clip_loss_value(kOrtho2, cfg(0.0)), ConfigError);
}

TEST(ClipLoss, SymmetricAveragesBothDirections) {
  std::mt19937_64 rng(5);
  const Matrix q = unit_rows(5, 4, rng), k = unit_rows(5, 4, rng);
  const double qk = tape_loss(q, k, cfg(0.2, LossDirection::paper_one_sided));
  const double kq = tape_loss(k, q, cfg(0.2, LossDirection::paper_one_sided));
  EXPECT_NEAR(tape_loss(q, k, cfg(0.2)), 0.5 * (qk + kq), 1e-12);
}

TEST(ClipLoss, NonNegativeAndTapeMatchesEager) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 8, d = 2 + rng() % 15;
    const Matrix q = unit_rows(n, d, rng), k = unit_rows(n, d, rng);
    for (auto dir : {LossDirection::symmetric, LossDirection::paper_one_sided}) {
      const double v = tape_loss(q, k, cfg(0.1, dir));
      EXPECT_GE(v, 0.0);
      EXPECT_NEAR(v, clip_loss_value(similarity_matrix(q, k), cfg(0.1, dir)), 1e-12);
    }
  }
}

TEST(ClipLoss, PermutationEquivariant) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 7, d = 2 + rng() % 15;
    const Matrix q = unit_rows(n, d, rng), k = unit_rows(n, d, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix qp(n, d), kp(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        qp(i, j) = q(perm[i], j);
        kp(i, j) = k(perm[i], j);
      }
    EXPECT_NEAR(tape_loss(q, k, cfg(0.1)), tape_loss(qp, kp, cfg(0.1)), 1e-12);
  }
}

TEST(ClipLoss, DecreasingTemperatureDecreasesLossOnDominantDiagonal) {
  double previous = INFINITY;
  for (double tau : {2.0, 1.0, 0.5, 0.2, 0.1, 0.05}) {
    const double v = tape_loss(kOrtho2, kOrtho2, cfg(tau));
    EXPECT_LT(v, previous) << tau;
    previous = v;
  }
}

TEST(ClipLoss, StabilizationDoesNotChangeValue) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 8;
    const Matrix s = random_matrix(n, n, rng, -1, 1);
    for (double tau : {1.0, 0.1, 0.01}) {
      for (auto dir : {LossDirection::symmetric, LossDirection::paper_one_sided}) {
        const double a = clip_loss_value(s, cfg(tau, dir), true);
        const double b = clip_loss_value(s, cfg(tau, dir), false);
        EXPECT_NEAR(a, b, 1e-10 * std::max(1.0, std::abs(a)));
      }
    }
  }
}

TEST(ClipLoss, StableForSharpTemperatures) {
  // Logits of ±1e4 overflow exp() without max-subtraction.
  const double v = tape_loss(kOrtho2, Matrix{{0, 1}, {1, 0}}, cfg(1e-4));
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 1e4, 1e-6);
}

TEST(ClipLoss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 1 + rng() % 8, d = 2 + rng() % 15;
    for (auto dir : {LossDirection::symmetric, LossDirection::paper_one_sided}) {
      const LossConfig c = cfg(0.1, dir);
      const double err = grad_check(
          [&](Tape&, std::span<const Var> p) {
            return clip_loss(ops::l2_normalize_rows(p[0]), ops::l2_normalize_rows(p[1]), c);
          },
          {random_matrix(n, d, rng), random_matrix(n, d, rng)});
      EXPECT_LT(err, 1e-5) << "n=" << n << " d=" << d;
    }
  }
}

TEST(ClipLoss, RawGradientsWithoutNormalization) {
  std::mt19937_64 rng(10);
  const double err = grad_check([](Tape&, std::span<const Var> p) { return clip_loss(p[0], p[1], LossConfig{0.5}); },
                                {random_matrix(4, 3, rng), random_matrix(4, 3, rng)});
  EXPECT_LT(err, 1e-5);
}

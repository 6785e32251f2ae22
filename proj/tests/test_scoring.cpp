// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "xpert/errors.hpp"
#include "xpert/scoring.hpp"

namespace xpert {
namespace {

const Matrix kX{{3, 6}};
const Matrix kW1{{2, 2}, {4, 1}};
const Matrix kW2{{4, 4}, {8, 1}};

Matrix zero_at(std::size_t i, std::size_t j) {
  Matrix m(2, 2, 1.0);
  m(i, j) = 0.0;
  return m;
}

std::vector<double> norms_of(const Matrix& x) { return column_norms(x); }

// Independent long-double ||X U1 U2||_F^2.
long double chain_loss(const Matrix& x, const Matrix& u1, const Matrix& u2) {
  return test::naive_frobenius_sq(test::naive_matmul(test::naive_matmul(x, u1), u2));
}

std::vector<std::size_t> stable_argsort(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  return idx;
}

TEST(Losses, ExampleValues) {
  EXPECT_EQ(local_loss(zero_at(0, 0), kW1, kX), 36.0);
  EXPECT_EQ(local_loss(zero_at(1, 1), kW1, kX), 36.0);
  EXPECT_EQ(foresight_loss(zero_at(0, 0), kW1, kW2, kX), 1152.0);
  EXPECT_EQ(foresight_loss(zero_at(1, 1), kW1, kW2, kX), 2340.0);
}

TEST(Losses, AllOnesMaskIsZero) {
  const Matrix ones(2, 2, 1.0);
  EXPECT_EQ(local_loss(ones, kW1, kX), 0.0);
  EXPECT_EQ(foresight_loss(ones, kW1, kW2, kX), 0.0);
}

TEST(Losses, ShapeMismatchThrows) {
  EXPECT_THROW(foresight_loss(Matrix(2, 3, 1.0), kW1, kW2, kX), ShapeError);
  EXPECT_THROW(foresight_loss(zero_at(0, 0), kW1, Matrix(3, 2), kX), ShapeError);
  EXPECT_THROW(local_loss(zero_at(0, 0), kW1, Matrix(1, 3)), ShapeError);
}

TEST(Losses, MatchNaiveRecomputation) {
  test::Rng rng(10);
  for (int t = 0; t < 20; ++t) {
    const std::size_t l = rng.index(1, 6), m = rng.index(1, 6), n = rng.index(1, 6), p = rng.index(1, 6);
    const auto x = rng.matrix(l, m), w1 = rng.matrix(m, n), w2 = rng.matrix(n, p), mask = rng.binary(m, n, 0.5);
    const auto delta = subtract(hadamard(mask, w1), w1);
    EXPECT_LE(test::rel_err(foresight_loss(mask, w1, w2, x),
                            static_cast<double>(chain_loss(x, delta, w2))), 1e-12);
    EXPECT_LE(test::rel_err(local_loss(mask, w1, x),
                            test::naive_frobenius_sq(test::naive_matmul(x, delta))), 1e-12);
  }
}

TEST(ForesightScores, ExampleValues) {
  const auto s = foresight_scores(kW1, kW2, norms_of(kX)).scores;
  EXPECT_DOUBLE_EQ(s(0, 0), 2.0 * std::sqrt(32.0) * 3.0);
  EXPECT_DOUBLE_EQ(s(1, 1), 1.0 * std::sqrt(65.0) * 6.0);
  EXPECT_NEAR(s(0, 0), 33.941, 5e-4);
  EXPECT_NEAR(s(1, 1), 48.374, 5e-4);
  EXPECT_LT(s(0, 0), s(1, 1));
}

TEST(ForesightScores, ConstantDownstreamReducesToWanda) {
  test::Rng rng(11);
  const auto w = rng.matrix(5, 4);
  std::vector<double> norms(5);
  for (double& v : norms) v = std::abs(rng.normal());
  const auto fs = foresight_scores(w, Matrix(4, 3, 1.0), norms).scores;
  const auto wd = wanda_scores(w, norms).scores;
  for (std::size_t k = 0; k < fs.size(); ++k) {
    EXPECT_NEAR(fs.data()[k], wd.data()[k] * std::sqrt(3.0), 1e-12 * (1 + wd.data()[k]));
  }
}

TEST(ForesightScores, RejectsBadInputs) {
  const std::vector<double> norms{3.0, 6.0};
  EXPECT_THROW(foresight_scores(kW1, Matrix(3, 2), norms), ShapeError);
  EXPECT_THROW(foresight_scores(kW1, kW2, std::vector<double>{1.0}), ShapeError);
  EXPECT_THROW(foresight_scores(kW1, kW2, std::vector<double>{-1.0, 1.0}), ValidationError);
  EXPECT_THROW(wanda_scores(kW1, std::vector<double>{NAN, 1.0}), ValidationError);
}

TEST(ForesightScores, SerialEqualsParallelBitwise) {
  set_num_threads(4);
  test::Rng rng(12);
  const auto w1 = rng.matrix(40, 30), w2 = rng.matrix(30, 20);
  const auto norms = column_norms(rng.matrix(8, 40));
  EXPECT_EQ(foresight_scores(w1, w2, norms, Exec::serial).scores,
            foresight_scores(w1, w2, norms, Exec::parallel).scores);
  EXPECT_EQ(wanda_scores(w1, norms, Exec::serial).scores, wanda_scores(w1, norms, Exec::parallel).scores);
  set_num_threads(1);
}

TEST(WandaScores, ExampleTieAndTrivialCases) {
  const auto s = wanda_scores(kW1, norms_of(kX)).scores;
  EXPECT_EQ(s(0, 0), 6.0);
  EXPECT_EQ(s(1, 1), 6.0);
  EXPECT_EQ(wanda_scores(Matrix(2, 2), norms_of(kX)).scores, Matrix(2, 2));
  test::Rng rng(13);
  const auto w = rng.matrix(3, 4);
  const auto unit = wanda_scores(w, std::vector<double>(3, 1.0)).scores;
  for (std::size_t k = 0; k < w.size(); ++k) EXPECT_EQ(unit.data()[k], std::abs(w.data()[k]));
  EXPECT_EQ(magnitude_scores(w).scores, unit);
}

TEST(AttentionScores, MatchDirectFormulas) {
  test::Rng rng(14);
  for (auto [d, dk] : {std::pair<std::size_t, std::size_t>{2, 2}, {6, 3}, {5, 5}}) {
    const auto q = rng.matrix(d, dk), k = rng.matrix(d, dk);
    std::vector<double> norms(d);
    for (double& v : norms) v = std::abs(rng.normal());
    const auto sq = foresight_attention_scores(q, k, norms, AttentionSide::q).scores;
    const auto sk = foresight_attention_scores(q, k, norms, AttentionSide::k).scores;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < dk; ++j) {
        double krow = 0.0, qcol = 0.0;
        for (std::size_t c = 0; c < dk; ++c) krow += k(j, c) * k(j, c);
        for (std::size_t r = 0; r < d; ++r) qcol += q(r, j) * q(r, j);
        EXPECT_NEAR(sq(i, j), std::abs(q(i, j)) * std::sqrt(krow) * norms[i], 1e-12);
        EXPECT_NEAR(sk(i, j), std::abs(k(i, j)) * std::sqrt(qcol) * norms[i], 1e-12);
      }
  }
}

TEST(AttentionScores, SymmetricQEqualsKGivesEqualSides) {
  test::Rng rng(15);
  const auto g = rng.matrix(4, 4);
  const auto sym = add(g, transpose(g));
  const std::vector<double> norms{1.0, 2.0, 0.5, 3.0};
  EXPECT_EQ(foresight_attention_scores(sym, sym, norms, AttentionSide::q).scores,
            foresight_attention_scores(sym, sym, norms, AttentionSide::k).scores);
}

TEST(AttentionScores, ZeroKeyRowZeroesQueryColumn) {
  test::Rng rng(16);
  const auto q = rng.matrix(4, 3);
  auto k = rng.matrix(4, 3);
  for (std::size_t c = 0; c < 3; ++c) k(1, c) = 0.0;
  const auto s = foresight_attention_scores(q, k, std::vector<double>(4, 1.0), AttentionSide::q).scores;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(s(i, 1), 0.0);
}

TEST(AttentionScores, RejectsMismatchedShapes) {
  EXPECT_THROW(foresight_attention_scores(Matrix(4, 3), Matrix(4, 2), std::vector<double>(4, 1.0),
                                          AttentionSide::q),
               ShapeError);
}

TEST(HessianDiag, OrthonormalColumnsAndUnitRowsGiveTwo) {
  const Matrix x{{1, 0}, {0, 1}, {0, 0}};
  const double s = 1.0 / std::sqrt(2.0);
  const Matrix u2{{s, s}, {1, 0}, {0, -1}};
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(exact_hessian_diag(x, u2, i, j), 2.0, 1e-15);
}

TEST(HessianDiag, QuadraticHomogeneityInX) {
  test::Rng rng(17);
  const auto x = rng.matrix(3, 4), u2 = rng.matrix(5, 2);
  EXPECT_NEAR(exact_hessian_diag(scaled(x, 2.0), u2, 1, 3), 4.0 * exact_hessian_diag(x, u2, 1, 3),
              1e-12 * exact_hessian_diag(x, u2, 1, 3) * 4);
}

TEST(HessianDiag, MatchesCentralFiniteDifferences) {
  test::Rng rng(18);
  for (int t = 0; t < 60; ++t) {
    const std::size_t l = rng.index(1, 6), m = rng.index(1, 6), n = rng.index(1, 6), p = rng.index(1, 6);
    const auto x = rng.matrix(l, m), u2 = rng.matrix(n, p);
    auto u1 = rng.matrix(m, n);
    const std::size_t i = rng.index(0, m - 1), j = rng.index(0, n - 1);
    const double h = 1e-2, base = u1(i, j);
    u1(i, j) = base + h;
    const long double up = chain_loss(x, u1, u2);
    u1(i, j) = base - h;
    const long double dn = chain_loss(x, u1, u2);
    u1(i, j) = base;
    const long double mid = chain_loss(x, u1, u2);
    const double fd = static_cast<double>((up - 2 * mid + dn) / (static_cast<long double>(h) * h));
    EXPECT_LE(test::rel_err(exact_hessian_diag(x, u2, i, j), fd), 1e-6) << "trial " << t;
  }
}

TEST(HessianDiag, IndexOutOfRangeThrows) {
  EXPECT_THROW(exact_hessian_diag(kX, kW2, 2, 0), ValidationError);
  EXPECT_THROW(exact_prune_delta(kX, kW1, kW2, 0, 2), ValidationError);
}

TEST(PruneDelta, ExampleValuesAndZeroEntry) {
  EXPECT_EQ(exact_prune_delta(kX, kW1, kW2, 0, 0), 1152.0);
  EXPECT_EQ(exact_prune_delta(kX, kW1, kW2, 1, 1), 2340.0);
  Matrix u1 = kW1;
  u1(0, 1) = 0.0;
  EXPECT_EQ(exact_prune_delta(kX, u1, kW2, 0, 1), 0.0);
}

// Zeroing one entry changes X U1 U2 by the rank-one term -w X(:,i) U2(j,:), so
// the exact loss is the squared ForeSight score on every X, not only on
// diagonal Gram matrices.
TEST(PruneDelta, EqualsSquaredScoreOnGeneralInputs) {
  test::Rng rng(19);
  for (int t = 0; t < 50; ++t) {
    const std::size_t l = rng.index(1, 8), m = rng.index(1, 6), n = rng.index(1, 6), p = rng.index(1, 6);
    const auto x = rng.matrix(l, m), u1 = rng.matrix(m, n), u2 = rng.matrix(n, p);
    const auto s = foresight_scores(u1, u2, column_norms(x)).scores;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        Matrix delta(m, n);
        delta(i, j) = -u1(i, j);
        const double oracle = static_cast<double>(chain_loss(x, delta, u2));
        EXPECT_LE(test::rel_err(exact_prune_delta(x, u1, u2, i, j), oracle), 1e-10);
        EXPECT_LE(test::rel_err(s(i, j) * s(i, j), oracle), 1e-10);
      }
  }
}

TEST(Ranking, ScoreOrderEqualsHessianWeightedOrder) {
  test::Rng rng(20);
  for (int t = 0; t < 50; ++t) {
    const std::size_t l = rng.index(2, 8), m = rng.index(2, 6), n = rng.index(2, 6), p = rng.index(1, 6);
    const auto x = rng.matrix(l, m), u1 = rng.matrix(m, n), u2 = rng.matrix(n, p);
    const auto s = foresight_scores(u1, u2, column_norms(x)).scores;
    std::vector<double> quad(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        quad[i * n + j] = u1(i, j) * u1(i, j) * exact_hessian_diag(x, u2, i, j) / 2.0;
    EXPECT_EQ(stable_argsort(s.data()), stable_argsort(quad)) << "trial " << t;
  }
}

TEST(Properties, PermutationEquivariance) {
  test::Rng rng(21);
  const auto w1 = rng.matrix(6, 4), w2 = rng.matrix(4, 3);
  std::vector<double> norms(6);
  for (double& v : norms) v = std::abs(rng.normal());
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  Matrix pw(6, 4);
  std::vector<double> pn(6);
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t c = 0; c < 4; ++c) pw(r, c) = w1(perm[r], c);
    pn[r] = norms[perm[r]];
  }
  const auto s = foresight_scores(w1, w2, norms).scores, ps = foresight_scores(pw, w2, pn).scores;
  const auto ws = wanda_scores(w1, norms).scores, pws = wanda_scores(pw, pn).scores;
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(ps(r, c), s(perm[r], c));
      EXPECT_EQ(pws(r, c), ws(perm[r], c));
    }
}

// Cancellation inside a column breaks monotonicity even for a single-row X.
TEST(Properties, LossNotMonotoneUnderRefinementInGeneral) {
  const Matrix x{{1, 1}};
  const Matrix w1{{1}, {-1}};
  const Matrix w2{{1}};
  EXPECT_EQ(foresight_loss(Matrix{{0}, {1}}, w1, w2, x), 1.0);
  EXPECT_EQ(foresight_loss(Matrix{{0}, {0}}, w1, w2, x), 0.0);
}

TEST(Properties, LossMonotoneUnderRefinementForNonnegativeSingleRow) {
  test::Rng rng(22);
  auto nonneg = [&](std::size_t r, std::size_t c) {
    auto m = rng.matrix(r, c);
    for (double& v : m.data()) v = std::abs(v);
    return m;
  };
  for (int t = 0; t < 30; ++t) {
    const std::size_t m = rng.index(2, 6), n = rng.index(2, 6), p = rng.index(1, 5);
    const auto x = nonneg(1, m), w1 = nonneg(m, n), w2 = nonneg(n, p);
    Matrix mask(m, n, 1.0);
    double prev = foresight_loss(mask, w1, w2, x);
    std::vector<std::size_t> order(m * n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t k : order) {
      mask.data()[k] = 0.0;
      const double cur = foresight_loss(mask, w1, w2, x);
      EXPECT_GE(cur, prev);
      prev = cur;
    }
  }
}

TEST(ScoreLayer, DispatchesOnPairing) {
  test::Rng rng(23);
  std::vector<LoraLinear> layers;
  layers.push_back(make_lora_linear(rng.matrix(5, 4), rng.matrix(1, 4), 2.0));
  layers.push_back(make_lora_linear(rng.matrix(4, 3), rng.matrix(1, 3), 2.0));
  const auto model = make_mlp(layers, Activation::relu);
  const auto stats = forward(model, rng.matrix(6, 5)).stats;
  EXPECT_EQ(score_layer(model, 0, stats, Criterion::foresight).scores,
            foresight_scores(model.layers[0].base_w, model.layers[1].base_w, stats.input_col_norms[0]).scores);
  // The last layer has no downstream partner and falls back to Wanda.
  EXPECT_EQ(score_layer(model, 1, stats, Criterion::foresight).scores,
            wanda_scores(model.layers[1].base_w, stats.input_col_norms[1]).scores);
  EXPECT_EQ(score_layer(model, 0, stats, Criterion::magnitude).scores,
            magnitude_scores(model.layers[0].base_w).scores);
}

}  // namespace
}  // namespace xpert

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "xpert/kernels.hpp"
#include "xpert/matrix.hpp"
#include "xpert/model.hpp"

namespace xpert {

enum class Criterion { foresight, foresight_q, foresight_k, wanda, magnitude };

std::string to_string(Criterion c);
Criterion criterion_from_string(const std::string& s);

// Nonnegative importance scores with the shape of the scored weight.
struct ScoreMatrix {
  Matrix scores;
  Criterion criterion = Criterion::magnitude;
};

// ||X (M.*W1 - W1) W2||_F^2: output error of pruning W1 seen after the next layer.
double foresight_loss(const Matrix& mask, const Matrix& w1_eff, const Matrix& w2_eff,
                      const Matrix& x);

// ||X (M.*W1 - W1)||_F^2: the same error measured at the pruned layer's output.
double local_loss(const Matrix& mask, const Matrix& w1_eff, const Matrix& x);

// score(i,j) = |W1(i,j)| * ||W2(j,:)|| * ||X(:,i)||.
//
// W1 is m x n (input channels x outputs), W2 is n x p and input_col_norms has
// length m. Each row i only reads row i of W1 and the precomputed downstream
// row norms, so rows are scored independently.
ScoreMatrix foresight_scores(const Matrix& w1_eff, const Matrix& w2_eff,
                             std::span<const double> input_col_norms,
                             Exec exec = Exec::parallel);

enum class AttentionSide { q, k };

// Joint Q/K scores for q_eff, k_eff of shape d x d_k (d_k <= d).
//   Q side: |Q(i,j)| * ||K(j,:)|| * ||X(:,i)||
//   K side: |K(i,j)| * ||Q(:,j)|| * ||X(:,i)||
// The Q side reads a row of K and the K side a column of Q, as printed in the
// derivation this follows; no symmetrisation is applied.
ScoreMatrix foresight_attention_scores(const Matrix& q_eff, const Matrix& k_eff,
                                       std::span<const double> input_col_norms,
                                       AttentionSide side, Exec exec = Exec::parallel);

// score(i,j) = |W(i,j)| * ||X(:,i)||.
ScoreMatrix wanda_scores(const Matrix& w_eff, std::span<const double> input_col_norms,
                         Exec exec = Exec::parallel);

ScoreMatrix magnitude_scores(const Matrix& w_eff);

// d^2/dU1(i,j)^2 of ||X U1 U2||_F^2, which is 2 (X^T X)_ii (U2 U2^T)_jj.
double exact_hessian_diag(const Matrix& x, const Matrix& u2, std::size_t i, std::size_t j);

// foresight_loss of the mask that zeroes only entry (i,j) of u1, computed by
// full recomposition.
double exact_prune_delta(const Matrix& x, const Matrix& u1, const Matrix& u2, std::size_t i,
                         std::size_t j);

// Scores layer `index` of `model` according to its pairing rule. The
// `criterion` picks between ForeSight (pairing-aware), Wanda and magnitude;
// a local_fallback pairing under ForeSight yields Wanda scores.
ScoreMatrix score_layer(const ToyModel& model, std::size_t index, const CalibrationStats& stats,
                        Criterion criterion, Exec exec = Exec::parallel);

}  // namespace xpert

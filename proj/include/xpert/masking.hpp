// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>

#include "xpert/kernels.hpp"
#include "xpert/matrix.hpp"
#include "xpert/model.hpp"
#include "xpert/scoring.hpp"

namespace xpert {

// EMA-smoothed scores for every prunable layer. `epoch` counts updates.
struct ScoreState {
  double ema_rate = 0.5;
  std::size_t epoch = 0;
  std::map<std::size_t, ScoreMatrix> smoothed;
};

// smoothed <- rate * fresh + (1 - rate) * smoothed for every layer in `fresh`;
// a layer seen for the first time takes `fresh` as is. Increments epoch.
ScoreState ema_update(ScoreState state, const std::map<std::size_t, ScoreMatrix>& fresh);

// Number of entries pruned from a row of length n at sparsity s: floor(s*n).
// A 1e-9 slack absorbs decimal representation error (0.29 * 100 -> 29, not 28).
std::size_t prune_count(double sparsity, std::size_t n);

// Per row, zero the floor(s*n) lowest-scoring entries; ties prune the lowest
// column index first.
Matrix rowwise_prune(const ScoreMatrix& scores, double sparsity, Exec exec = Exec::parallel);

// Same selection rule over the whole matrix (ties by lowest flat index).
// Experimental, never used by default.
Matrix global_prune(const ScoreMatrix& scores, double sparsity);

LoraLinear apply_mask(LoraLinear layer, const Matrix& mask);

// Fraction of zero entries of a binary mask.
double sparsity_of(const Matrix& mask);

// Fraction of entries that differ between two masks.
double mask_churn(const Matrix& before, const Matrix& after);

}  // namespace xpert

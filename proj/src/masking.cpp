// SPDX-License-Identifier: Apache-2.0
#include "xpert/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "row_parallel.hpp"

namespace xpert {

ScoreState ema_update(ScoreState state, const std::map<std::size_t, ScoreMatrix>& fresh) {
  const double eta = state.ema_rate;
  if (!(eta > 0.0 && eta <= 1.0)) {
    throw ValidationError("ema_update: rate must lie in (0, 1], got " + std::to_string(eta));
  }
  for (const auto& [layer, scores] : fresh) {
    auto it = state.smoothed.find(layer);
    if (it == state.smoothed.end()) {
      state.smoothed.emplace(layer, scores);
      continue;
    }
    auto& prior = it->second.scores;
    require_same_shape(prior, scores.scores, "ema_update");
    auto p = prior.data();
    auto f = scores.scores.data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = eta * f[k] + (1.0 - eta) * p[k];
    it->second.criterion = scores.criterion;
  }
  ++state.epoch;
  return state;
}

std::size_t prune_count(double sparsity, std::size_t n) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) {
    throw ValidationError("sparsity must lie in [0, 1), got " + std::to_string(sparsity));
  }
  const auto k = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(n) + 1e-9));
  return std::min(k, n);
}

Matrix rowwise_prune(const ScoreMatrix& scores, double sparsity, Exec exec) {
  const auto& s = scores.scores;
  const std::size_t n = s.cols();
  const std::size_t k = prune_count(sparsity, n);
  Matrix mask(s.rows(), n, 1.0);
  if (k == 0) return mask;
  detail::for_each_row(s.rows(), exec, [&](std::size_t i) {
    auto row = s.row(i);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    auto out = mask.row(i);
    for (std::size_t t = 0; t < k; ++t) out[order[t]] = 0.0;
  });
  return mask;
}

Matrix global_prune(const ScoreMatrix& scores, double sparsity) {
  const auto flat = scores.scores.data();
  const std::size_t k = prune_count(sparsity, flat.size());
  std::vector<std::size_t> order(flat.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return flat[a] < flat[b]; });
  Matrix mask(scores.scores.rows(), scores.scores.cols(), 1.0);
  for (std::size_t t = 0; t < k; ++t) mask.data()[order[t]] = 0.0;
  return mask;
}

LoraLinear apply_mask(LoraLinear layer, const Matrix& mask) {
  require_same_shape(layer.base_w, mask, "apply_mask");
  if (!is_binary(mask)) throw ValidationError("apply_mask: mask entries must be 0 or 1");
  layer.mask = mask;
  return layer;
}

double sparsity_of(const Matrix& mask) {
  if (!is_binary(mask)) throw ValidationError("sparsity_of: mask entries must be 0 or 1");
  const auto zeros = std::count(mask.data().begin(), mask.data().end(), 0.0);
  return static_cast<double>(zeros) / static_cast<double>(mask.size());
}

double mask_churn(const Matrix& before, const Matrix& after) {
  require_same_shape(before, after, "mask_churn");
  std::size_t flipped = 0;
  for (std::size_t k = 0; k < before.size(); ++k) {
    flipped += before.data()[k] != after.data()[k];
  }
  return static_cast<double>(flipped) / static_cast<double>(before.size());
}

}  // namespace xpert

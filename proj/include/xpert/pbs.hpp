// SPDX-License-Identifier: Apache-2.0
#pragma once

// Partial Brain Surgeon: a closed-form ridge update of the LoRA factor B that
// drives the composed weight W + scale * B * A towards zero on pruned
// coordinates. Each output row i solves
//
//   min_db ||r_i + db * A_S||^2 + lambda * ||db||^2,   S = {j : M(i,j) = 0}
//
// whose minimiser is db = -r_i A_S^T (A_S A_S^T + lambda I)^-1. The r x r
// system is SPD for lambda > 0 and is solved by Cholesky. When |S| < r the
// equivalent |S| x |S| system (A_S^T A_S + lambda I) is solved instead.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "xpert/kernels.hpp"
#include "xpert/matrix.hpp"
#include "xpert/model.hpp"

namespace xpert {

inline constexpr double kDefaultPbsLambda = 1e-8;

struct PbsRowReport {
  std::size_t pruned_count = 0;
  double residual_before = 0.0;  // squared norm over the pruned coordinates
  double residual_after = 0.0;
  double update_norm = 0.0;
  bool over_constrained = false;  // pruned_count > rank
  bool used_fallback_solver = false;
};

struct PbsReport {
  std::vector<PbsRowReport> rows;

  double total_before() const;
  double total_after() const;
  std::size_t over_constrained_rows() const;
};

struct PbsOptions {
  double lambda = kDefaultPbsLambda;
  // Fold the LoRA scale into A for the row system so the update acts on the
  // same product the mask sees. When false, A is used unscaled.
  bool scale_adapter = true;
};

// Minimiser of ||residual + db * a_cols||^2 + lambda * ||db||^2.
// residual has length |S|, a_cols is r x |S|; returns db of length r.
std::vector<double> pbs_row_update(std::span<const double> residual, const Matrix& a_cols,
                                   double lambda, bool* used_fallback = nullptr);

struct PbsResult {
  Matrix delta_b;
  PbsReport report;
};

// Row-wise correction for every row of the layer. Rows without pruned
// coordinates get a zero update. The caller adds delta_b to adapter_b.
PbsResult pbs_correct(const LoraLinear& layer, const Matrix& mask, const PbsOptions& options = {},
                      Exec exec = Exec::parallel);

// ||(1 - M) .* (W + scale * B * A)||_F^2
double masked_residual_norm(const LoraLinear& layer, const Matrix& mask);

// One line per row: "row=<i> pruned=<n> before=<x> after=<y> update=<z> over_constrained=<0|1>".
std::string format_pbs_report(const PbsReport& report);

}  // namespace xpert

// SPDX-License-Identifier: Apache-2.0
#include "xpert/pbs.hpp"

#include <cmath>
#include <sstream>

#include "row_parallel.hpp"

namespace xpert {

double PbsReport::total_before() const {
  double s = 0.0;
  for (const auto& r : rows) s += r.residual_before;
  return s;
}

double PbsReport::total_after() const {
  double s = 0.0;
  for (const auto& r : rows) s += r.residual_after;
  return s;
}

std::size_t PbsReport::over_constrained_rows() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.over_constrained;
  return n;
}

namespace {

// In-place Cholesky of the n x n SPD matrix g (row-major), lower factor.
bool cholesky(std::vector<double>& g, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = g[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= g[j * n + k] * g[j * n + k];
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    g[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = g[i * n + j];
      for (std::size_t k = 0; k < j; ++k) v -= g[i * n + k] * g[j * n + k];
      g[i * n + j] = v / ljj;
    }
  }
  return true;
}

void cholesky_solve(const std::vector<double>& l, std::size_t n, std::vector<double>& b) {
  for (std::size_t i = 0; i < n; ++i) {
    double v = b[i];
    for (std::size_t k = 0; k < i; ++k) v -= l[i * n + k] * b[k];
    b[i] = v / l[i * n + i];
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double v = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) v -= l[k * n + ii] * b[k];
    b[ii] = v / l[ii * n + ii];
  }
}

// Gaussian elimination with partial pivoting; fallback when Cholesky breaks down.
bool lu_solve(std::vector<double> g, std::size_t n, std::vector<double>& b) {
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(g[r * n + c]) > std::abs(g[piv * n + c])) piv = r;
    }
    if (g[piv * n + c] == 0.0) return false;
    if (piv != c) {
      for (std::size_t k = 0; k < n; ++k) std::swap(g[c * n + k], g[piv * n + k]);
      std::swap(b[c], b[piv]);
    }
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = g[r * n + c] / g[c * n + c];
      for (std::size_t k = c; k < n; ++k) g[r * n + k] -= f * g[c * n + k];
      b[r] -= f * b[c];
    }
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double v = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) v -= g[ii * n + k] * b[k];
    b[ii] = v / g[ii * n + ii];
  }
  return true;
}

}  // namespace

std::vector<double> pbs_row_update(std::span<const double> residual, const Matrix& a_cols,
                                   double lambda, bool* used_fallback) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    throw ValidationError("pbs: lambda must be a positive finite number");
  }
  if (a_cols.cols() != residual.size()) {
    throw ShapeError("pbs_row_update: residual has " + std::to_string(residual.size()) +
                     " entries, a_cols is " + a_cols.shape_str());
  }
  if (!a_cols.all_finite()) throw NumericError("pbs_row_update: non-finite adapter entries");
  for (double v : residual) {
    if (!std::isfinite(v)) throw NumericError("pbs_row_update: non-finite residual");
  }
  const std::size_t r = a_cols.rows();
  const std::size_t s = a_cols.cols();

  // Primal: (a a^T + lambda I_r) x = a res, db = -x.
  // Dual when s < r: (a^T a + lambda I_s) y = res, db = -a y. Same solution by
  // the push-through identity; the smaller Gram matrix is the well-conditioned one.
  const bool dual = s < r;
  const std::size_t n = dual ? s : r;
  std::vector<double> gram(n * n, 0.0);
  std::vector<double> rhs(n, 0.0);
  auto entry = [&](std::size_t p, std::size_t q) {
    double v = 0.0;
    if (dual) {
      for (std::size_t k = 0; k < r; ++k) v += a_cols(k, p) * a_cols(k, q);
    } else {
      auto ap = a_cols.row(p), aq = a_cols.row(q);
      for (std::size_t k = 0; k < s; ++k) v += ap[k] * aq[k];
    }
    return v;
  };
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q <= p; ++q) {
      const double v = entry(p, q);
      gram[p * n + q] = v;
      gram[q * n + p] = v;
    }
    gram[p * n + p] += lambda;
    if (dual) {
      rhs[p] = residual[p];
    } else {
      auto ap = a_cols.row(p);
      double v = 0.0;
      for (std::size_t k = 0; k < s; ++k) v += ap[k] * residual[k];
      rhs[p] = v;
    }
  }

  std::vector<double> y = rhs;
  std::vector<double> factor = gram;
  bool fallback = false;
  if (cholesky(factor, n)) {
    cholesky_solve(factor, n, y);
  } else {
    fallback = true;
    y = rhs;
    if (!lu_solve(gram, n, y)) throw NumericError("pbs_row_update: singular row system");
  }
  if (used_fallback) *used_fallback = fallback;

  std::vector<double> sol(r, 0.0);
  for (std::size_t p = 0; p < r; ++p) {
    if (dual) {
      double v = 0.0;
      for (std::size_t k = 0; k < s; ++k) v += a_cols(p, k) * y[k];
      sol[p] = -v;
    } else {
      sol[p] = -y[p];
    }
    if (!std::isfinite(sol[p])) throw NumericError("pbs_row_update: non-finite update");
  }
  return sol;
}

PbsResult pbs_correct(const LoraLinear& layer, const Matrix& mask, const PbsOptions& options,
                      Exec exec) {
  if (!(options.lambda > 0.0) || !std::isfinite(options.lambda)) {
    throw ValidationError("pbs: lambda must be a positive finite number");
  }
  require_same_shape(layer.base_w, mask, "pbs_correct mask");
  if (!is_binary(mask)) throw ValidationError("pbs_correct: mask entries must be 0 or 1");
  const Matrix composed = compose_effective(layer, exec);
  const std::size_t m = composed.rows();
  const std::size_t n = composed.cols();
  const std::size_t r = layer.rank();
  const double a_factor = options.scale_adapter ? layer.scale : 1.0;
  const double apply_factor = layer.scale;

  PbsResult result{Matrix(m, r), PbsReport{std::vector<PbsRowReport>(m)}};
  detail::for_each_row(m, exec, [&](std::size_t i) {
    std::vector<std::size_t> pruned;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask(i, j) == 0.0) pruned.push_back(j);
    }
    auto& rep = result.report.rows[i];
    rep.pruned_count = pruned.size();
    rep.over_constrained = pruned.size() > r;
    if (pruned.empty()) return;

    std::vector<double> residual(pruned.size());
    Matrix a_cols(r, pruned.size());
    for (std::size_t t = 0; t < pruned.size(); ++t) {
      residual[t] = composed(i, pruned[t]);
      for (std::size_t p = 0; p < r; ++p) a_cols(p, t) = a_factor * layer.adapter_a(p, pruned[t]);
    }
    bool fallback = false;
    const auto db = pbs_row_update(residual, a_cols, options.lambda, &fallback);
    rep.used_fallback_solver = fallback;

    double before = 0.0;
    double after = 0.0;
    for (std::size_t t = 0; t < pruned.size(); ++t) {
      double v = residual[t];
      for (std::size_t p = 0; p < r; ++p) v += apply_factor * db[p] * layer.adapter_a(p, pruned[t]);
      before += residual[t] * residual[t];
      after += v * v;
    }
    double norm = 0.0;
    for (std::size_t p = 0; p < r; ++p) {
      result.delta_b(i, p) = db[p];
      norm += db[p] * db[p];
    }
    rep.residual_before = before;
    rep.residual_after = after;
    rep.update_norm = std::sqrt(norm);
  });
  return result;
}

double masked_residual_norm(const LoraLinear& layer, const Matrix& mask) {
  require_same_shape(layer.base_w, mask, "masked_residual_norm mask");
  const Matrix composed = compose_effective(layer, Exec::serial);
  double s = 0.0;
  for (std::size_t k = 0; k < composed.size(); ++k) {
    const double v = (1.0 - mask.data()[k]) * composed.data()[k];
    s += v * v;
  }
  return s;
}

std::string format_pbs_report(const PbsReport& report) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    out << "row=" << i << " pruned=" << r.pruned_count << " before=" << r.residual_before
        << " after=" << r.residual_after << " update=" << r.update_norm
        << " over_constrained=" << (r.over_constrained ? 1 : 0) << '\n';
  }
  return out.str();
}

}  // namespace xpert

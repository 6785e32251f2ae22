// SPDX-License-Identifier: Apache-2.0
#include "xpert/scoring.hpp"

#include <cmath>

#include "row_parallel.hpp"

namespace xpert {

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::foresight: return "foresight";
    case Criterion::foresight_q: return "foresight_q";
    case Criterion::foresight_k: return "foresight_k";
    case Criterion::wanda: return "wanda";
    case Criterion::magnitude: return "magnitude";
  }
  return "unknown";
}

Criterion criterion_from_string(const std::string& s) {
  if (s == "foresight") return Criterion::foresight;
  if (s == "foresight_q") return Criterion::foresight_q;
  if (s == "foresight_k") return Criterion::foresight_k;
  if (s == "wanda") return Criterion::wanda;
  if (s == "magnitude") return Criterion::magnitude;
  throw ValidationError("unknown criterion '" + s + "'");
}

namespace {

void check_norms(std::span<const double> norms, std::size_t expected, const char* op) {
  if (norms.size() != expected) {
    throw ShapeError(std::string(op) + ": " + std::to_string(norms.size()) +
                     " input norms for " + std::to_string(expected) + " weight rows");
  }
  for (double v : norms) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ValidationError(std::string(op) + ": input norms must be finite and nonnegative");
    }
  }
}

void check_mask(const Matrix& mask, const Matrix& w1, const char* op) {
  require_same_shape(w1, mask, op);
}

// X * (M.*W1 - W1), i.e. minus the contribution of the pruned entries.
Matrix pruned_delta_output(const Matrix& mask, const Matrix& w1, const Matrix& x) {
  if (x.cols() != w1.rows()) {
    throw ShapeError("loss: x has " + std::to_string(x.cols()) + " columns, weight has " +
                     std::to_string(w1.rows()) + " rows");
  }
  Matrix delta(w1.rows(), w1.cols());
  auto d = delta.data();
  auto w = w1.data();
  auto m = mask.data();
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = m[k] * w[k] - w[k];
  return matmul(x, delta, Exec::serial);
}

// score(i,j) = |W(i,j)| * col_factor[j] * row_factor[i]
ScoreMatrix separable_scores(const Matrix& w, std::span<const double> row_factor,
                             std::span<const double> col_factor, Criterion criterion,
                             Exec exec) {
  ScoreMatrix out{Matrix(w.rows(), w.cols()), criterion};
  detail::for_each_row(w.rows(), exec, [&](std::size_t i) {
    auto src = w.row(i);
    auto dst = out.scores.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) {
      dst[j] = std::abs(src[j]) * col_factor[j] * row_factor[i];
    }
  });
  if (!out.scores.all_finite()) throw NumericError("scores: non-finite score");
  return out;
}

void check_index(const Matrix& u, std::size_t i, std::size_t j, const char* op) {
  if (i >= u.rows() || j >= u.cols()) {
    throw ValidationError(std::string(op) + ": index (" + std::to_string(i) + ", " +
                          std::to_string(j) + ") out of range for " + u.shape_str());
  }
}

}  // namespace

double foresight_loss(const Matrix& mask, const Matrix& w1_eff, const Matrix& w2_eff,
                      const Matrix& x) {
  check_mask(mask, w1_eff, "foresight_loss mask");
  if (w1_eff.cols() != w2_eff.rows()) {
    throw ShapeError("foresight_loss: w1 " + w1_eff.shape_str() + " does not chain into w2 " +
                     w2_eff.shape_str());
  }
  return frobenius_sq(matmul(pruned_delta_output(mask, w1_eff, x), w2_eff, Exec::serial));
}

double local_loss(const Matrix& mask, const Matrix& w1_eff, const Matrix& x) {
  check_mask(mask, w1_eff, "local_loss mask");
  return frobenius_sq(pruned_delta_output(mask, w1_eff, x));
}

ScoreMatrix foresight_scores(const Matrix& w1_eff, const Matrix& w2_eff,
                             std::span<const double> input_col_norms, Exec exec) {
  if (w1_eff.cols() != w2_eff.rows()) {
    throw ShapeError("foresight_scores: w1 " + w1_eff.shape_str() +
                     " does not chain into w2 " + w2_eff.shape_str());
  }
  check_norms(input_col_norms, w1_eff.rows(), "foresight_scores");
  const auto downstream = row_norms(w2_eff);
  return separable_scores(w1_eff, input_col_norms, downstream, Criterion::foresight, exec);
}

ScoreMatrix foresight_attention_scores(const Matrix& q_eff, const Matrix& k_eff,
                                       std::span<const double> input_col_norms,
                                       AttentionSide side, Exec exec) {
  require_same_shape(q_eff, k_eff, "foresight_attention_scores");
  if (q_eff.cols() > q_eff.rows()) {
    throw ShapeError("foresight_attention_scores: needs d_k <= d, got " + q_eff.shape_str());
  }
  check_norms(input_col_norms, q_eff.rows(), "foresight_attention_scores");
  if (side == AttentionSide::q) {
    // Row j of K for every output column j of Q.
    std::vector<double> k_rows(q_eff.cols());
    for (std::size_t j = 0; j < k_rows.size(); ++j) {
      double s = 0.0;
      for (double v : k_eff.row(j)) s += v * v;
      k_rows[j] = std::sqrt(s);
    }
    return separable_scores(q_eff, input_col_norms, k_rows, Criterion::foresight_q, exec);
  }
  const auto q_cols = column_norms(q_eff);
  return separable_scores(k_eff, input_col_norms, q_cols, Criterion::foresight_k, exec);
}

ScoreMatrix wanda_scores(const Matrix& w_eff, std::span<const double> input_col_norms,
                         Exec exec) {
  check_norms(input_col_norms, w_eff.rows(), "wanda_scores");
  const std::vector<double> ones(w_eff.cols(), 1.0);
  return separable_scores(w_eff, input_col_norms, ones, Criterion::wanda, exec);
}

ScoreMatrix magnitude_scores(const Matrix& w_eff) {
  ScoreMatrix out{w_eff, Criterion::magnitude};
  for (double& v : out.scores.data()) v = std::abs(v);
  return out;
}

double exact_hessian_diag(const Matrix& x, const Matrix& u2, std::size_t i, std::size_t j) {
  if (i >= x.cols() || j >= u2.rows()) {
    throw ValidationError("exact_hessian_diag: index (" + std::to_string(i) + ", " +
                          std::to_string(j) + ") out of range for x " + x.shape_str() +
                          ", u2 " + u2.shape_str());
  }
  double gram_ii = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) gram_ii += x(r, i) * x(r, i);
  double down_jj = 0.0;
  for (double v : u2.row(j)) down_jj += v * v;
  return 2.0 * gram_ii * down_jj;
}

double exact_prune_delta(const Matrix& x, const Matrix& u1, const Matrix& u2, std::size_t i,
                         std::size_t j) {
  check_index(u1, i, j, "exact_prune_delta");
  Matrix mask(u1.rows(), u1.cols(), 1.0);
  mask(i, j) = 0.0;
  return foresight_loss(mask, u1, u2, x);
}

ScoreMatrix score_layer(const ToyModel& model, std::size_t index, const CalibrationStats& stats,
                        Criterion criterion, Exec exec) {
  if (index >= model.layers.size()) {
    throw ValidationError("score_layer: no layer " + std::to_string(index));
  }
  auto rule_it = model.pairing.find(index);
  if (rule_it == model.pairing.end()) {
    throw ValidationError("score_layer: layer " + std::to_string(index) + " is not prunable");
  }
  if (index >= stats.input_col_norms.size()) {
    throw ValidationError("score_layer: no calibration statistics for layer " +
                          std::to_string(index));
  }
  const auto& norms = stats.input_col_norms[index];
  const Matrix w = compose_effective(model.layers[index], exec);
  switch (criterion) {
    case Criterion::magnitude:
      return magnitude_scores(w);
    case Criterion::wanda:
      return wanda_scores(w, norms, exec);
    case Criterion::foresight:
    case Criterion::foresight_q:
    case Criterion::foresight_k:
      break;
  }
  const auto& rule = rule_it->second;
  switch (rule.kind) {
    case PairingRule::Kind::downstream:
      return foresight_scores(w, compose_effective(model.layers[rule.partner], exec), norms, exec);
    case PairingRule::Kind::attention_q:
      return foresight_attention_scores(w, compose_effective(model.layers[rule.partner], exec),
                                        norms, AttentionSide::q, exec);
    case PairingRule::Kind::attention_k:
      return foresight_attention_scores(compose_effective(model.layers[rule.partner], exec), w,
                                        norms, AttentionSide::k, exec);
    case PairingRule::Kind::local_fallback:
      break;
  }
  return wanda_scores(w, norms, exec);
}

}  // namespace xpert

// SPDX-License-Identifier: Apache-2.0
#include "xpert/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>

#include "xpert/kernels.hpp"
#include "xpert/scoring.hpp"

namespace xpert {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> view(const Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()),
          static_cast<Eigen::Index>(m.cols())};
}

// Top-r left singular vectors; rejects inputs without r nonzero singular values.
Eigen::MatrixXd principal_basis(const Matrix& m, std::size_t r, const char* which) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(view(m), Eigen::ComputeThinU);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) {
    throw ValidationError(std::string("grassmann: ") + which + " is the zero matrix");
  }
  const double tol = sv(0) * 1e-12 * static_cast<double>(std::max(m.rows(), m.cols()));
  if (sv(static_cast<Eigen::Index>(r) - 1) <= tol) {
    throw ValidationError(std::string("grassmann: ") + which + " has fewer than " +
                          std::to_string(r) + " nonzero singular values");
  }
  return svd.matrixU().leftCols(static_cast<Eigen::Index>(r));
}

}  // namespace

GrassmannResult grassmann(const Matrix& ba1, const Matrix& ba2, std::size_t r) {
  require_same_shape(ba1, ba2, "grassmann");
  if (r == 0 || r > std::min(ba1.rows(), ba1.cols())) {
    throw ValidationError("grassmann: rank " + std::to_string(r) + " must lie in [1, " +
                          std::to_string(std::min(ba1.rows(), ba1.cols())) + "]");
  }
  const Eigen::MatrixXd u1 = principal_basis(ba1, r, "first input");
  const Eigen::MatrixXd u2 = principal_basis(ba2, r, "second input");
  const Eigen::MatrixXd cross = u1.transpose() * u2;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(cross);

  GrassmannResult out;
  double sum = 0.0;
  for (Eigen::Index k = 0; k < svd.singularValues().size(); ++k) {
    const double raw = svd.singularValues()(k);
    const double c = std::clamp(raw, 0.0, 1.0);
    out.clamp_magnitude = std::max(out.clamp_magnitude, std::abs(raw - c));
    out.cosines.push_back(c);
    const double angle = std::acos(c);
    sum += angle * angle;
  }
  out.distance = std::sqrt(sum);
  return out;
}

double grassmann_distance(const Matrix& ba1, const Matrix& ba2, std::size_t r) {
  return grassmann(ba1, ba2, r).distance;
}

ProjectionEnergy projection_energy(const Matrix& ba, const Matrix& w, std::size_t r) {
  require_same_shape(w, ba, "projection_energy");
  if (r == 0 || r > std::min(w.rows(), w.cols())) {
    throw ValidationError("projection_energy: rank " + std::to_string(r) + " out of range");
  }
  const double total = frobenius_sq(ba);
  if (total == 0.0) throw ValidationError("projection_energy: adapter product is zero");

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(view(w), Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const auto ri = static_cast<Eigen::Index>(r);
  ProjectionEnergy out;
  if (ri < sv.size() && sv(ri - 1) - sv(ri) <= 1e-10) out.degenerate_spectrum = true;
  if (ri > sv.size()) out.degenerate_spectrum = true;

  const Eigen::MatrixXd v = svd.matrixV().leftCols(std::min(ri, sv.size()));
  const Eigen::MatrixXd projected = view(ba) * v;
  out.value = std::clamp(projected.squaredNorm() / total, 0.0, 1.0);
  return out;
}

double relative_performance(const MetricGroups& groups) {
  double sum = 0.0;
  std::size_t present = 0;
  for (const auto& [name, pairs] : groups) {
    if (pairs.empty()) continue;
    double group = 0.0;
    for (const auto& p : pairs) {
      if (!(p.dense != 0.0)) {
        throw ValidationError("relative_performance: dense metric of group '" + name +
                              "' is zero");
      }
      if (!(p.dense > 0.0)) {
        throw ValidationError("relative_performance: dense metric of group '" + name +
                              "' must be positive");
      }
      group += p.pruned / p.dense;
    }
    sum += group / static_cast<double>(pairs.size());
    ++present;
  }
  if (present == 0) throw ValidationError("relative_performance: no metric groups");
  return sum * 100.0 / static_cast<double>(present);
}

PropagationReport propagation_demo() {
  PropagationReport rep;
  rep.x = Matrix{{3, 6}};
  rep.w1 = Matrix{{2, 2}, {4, 1}};
  rep.w2 = Matrix{{4, 4}, {8, 1}};
  rep.forward = matmul(matmul(rep.x, rep.w1, Exec::serial), rep.w2, Exec::serial);

  const std::pair<std::size_t, std::size_t> entries[2] = {{0, 0}, {1, 1}};
  const auto norms = column_norms(rep.x);
  const auto wanda = wanda_scores(rep.w1, norms, Exec::serial);
  const auto fs = foresight_scores(rep.w1, rep.w2, norms, Exec::serial);
  for (int k = 0; k < 2; ++k) {
    Matrix mask(2, 2, 1.0);
    const auto [i, j] = entries[k];
    mask(i, j) = 0.0;
    rep.local_loss[k] = local_loss(mask, rep.w1, rep.x);
    rep.downstream_loss[k] = foresight_loss(mask, rep.w1, rep.w2, rep.x);
    rep.wanda_score[k] = wanda.scores(i, j);
    rep.foresight_score[k] = fs.scores(i, j);
  }
  return rep;
}

std::string render_text(const PropagationReport& r) {
  std::ostringstream out;
  out << "X * W1 * W2 = [" << r.forward(0, 0) << ", " << r.forward(0, 1) << "]\n";
  out << std::left << std::setw(18) << "pruned entry" << std::setw(12) << "local" << std::setw(14)
      << "downstream" << std::setw(10) << "wanda" << "foresight\n";
  const char* names[2] = {"W1(0,0)=2", "W1(1,1)=1"};
  for (int k = 0; k < 2; ++k) {
    out << std::left << std::setw(18) << names[k] << std::setw(12) << r.local_loss[k]
        << std::setw(14) << r.downstream_loss[k] << std::setw(10) << r.wanda_score[k]
        << std::fixed << std::setprecision(3) << r.foresight_score[k] << std::defaultfloat
        << std::setprecision(6) << '\n';
  }
  return out.str();
}

std::string render_json(const PropagationReport& r) {
  nlohmann::json j;
  j["forward"] = {r.forward(0, 0), r.forward(0, 1)};
  j["local_loss"] = {r.local_loss[0], r.local_loss[1]};
  j["downstream_loss"] = {r.downstream_loss[0], r.downstream_loss[1]};
  j["wanda_score"] = {r.wanda_score[0], r.wanda_score[1]};
  j["foresight_score"] = {r.foresight_score[0], r.foresight_score[1]};
  return j.dump(2) + "\n";
}

}  // namespace xpert

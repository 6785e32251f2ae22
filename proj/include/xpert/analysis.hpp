// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "xpert/matrix.hpp"

namespace xpert {

struct GrassmannResult {
  double distance = 0.0;
  std::vector<double> cosines;  // singular values of U1^T U2 after clamping
  double clamp_magnitude = 0.0;  // largest amount a cosine was moved into [0, 1]
};

// Distance between the top-r left singular subspaces of two adapter products:
// sqrt(sum_i acos(sigma_i)^2) over the singular values of U1^T U2.
// Throws ValidationError when either input has fewer than r nonzero singular values.
GrassmannResult grassmann(const Matrix& ba1, const Matrix& ba2, std::size_t r);
double grassmann_distance(const Matrix& ba1, const Matrix& ba2, std::size_t r);

struct ProjectionEnergy {
  double value = 0.0;
  // sigma_r and sigma_{r+1} of w are within 1e-10, so the top-r span is not unique.
  bool degenerate_spectrum = false;
};

// ||ba V V^T||_F^2 / ||ba||_F^2 with V the top-r right singular vectors of w.
ProjectionEnergy projection_energy(const Matrix& ba, const Matrix& w, std::size_t r);

struct MetricPair {
  double pruned = 0.0;
  double dense = 0.0;
};

// Group name -> per-task (pruned, dense) metric pairs, e.g. "acc", "f1", "rouge".
using MetricGroups = std::map<std::string, std::vector<MetricPair>>;

// 100 * (sum over present groups of the mean pruned/dense ratio) / #groups.
// Empty groups are dropped.
double relative_performance(const MetricGroups& groups);

// The two-layer error-propagation example: X = [3 6], W1 = [[2 2] [4 1]],
// W2 = [[4 4] [8 1]], pruning either W1(0,0) or W1(1,1).
struct PropagationReport {
  Matrix x, w1, w2;
  Matrix forward;                  // X * W1 * W2
  double local_loss[2]{};          // mask 1 zeroes (0,0), mask 2 zeroes (1,1)
  double downstream_loss[2]{};
  double wanda_score[2]{};
  double foresight_score[2]{};
};

PropagationReport propagation_demo();
std::string render_text(const PropagationReport& report);
std::string render_json(const PropagationReport& report);

}  // namespace xpert

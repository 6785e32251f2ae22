// SPDX-License-Identifier: Apache-2.0
#pragma once

// Row-parallel numeric kernels. Each kernel takes an Exec policy: serial is the
// reference implementation, parallel distributes independent output rows over
// OpenMP threads. Per-row arithmetic is identical in both modes, so results are
// bitwise equal regardless of thread count.

#include "xpert/matrix.hpp"

namespace xpert {

enum class Exec { serial, parallel };

// Number of OpenMP threads used by Exec::parallel (1 when built without OpenMP).
void set_num_threads(int n);
int num_threads();

// C = A * B.
Matrix matmul(const Matrix& a, const Matrix& b, Exec exec = Exec::parallel);
// C = A^T * B, without materialising the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b, Exec exec = Exec::parallel);
// C = A * B^T.
Matrix matmul_nt(const Matrix& a, const Matrix& b, Exec exec = Exec::parallel);

}  // namespace xpert

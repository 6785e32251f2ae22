// SPDX-License-Identifier: Apache-2.0
#include "xpert/kernels.hpp"

#include "row_parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace xpert {

using detail::for_each_row;

void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

// One output row of A*B. Accumulation order over k is fixed, which is what
// makes serial and parallel results identical.
inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  auto out = c.row(i);
  auto ar = a.row(i);
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double aik = ar[k];
    auto br = b.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += aik * br[j];
  }
}

inline void matmul_tn_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  auto out = c.row(i);
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double aki = a(k, i);
    auto br = b.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += aki * br[j];
  }
}

inline void matmul_nt_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  auto ar = a.row(i);
  for (std::size_t j = 0; j < b.rows(); ++j) {
    auto br = b.row(j);
    double s = 0.0;
    for (std::size_t k = 0; k < ar.size(); ++k) s += ar[k] * br[k];
    c(i, j) = s;
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b, Exec exec) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + a.shape_str() + " * " +
                     b.shape_str() + ")");
  }
  Matrix c(a.rows(), b.cols());
  for_each_row(a.rows(), exec, [&](std::size_t i) { matmul_row(a, b, c, i); });
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b, Exec exec) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: row counts differ (" + a.shape_str() + "^T * " +
                     b.shape_str() + ")");
  }
  Matrix c(a.cols(), b.cols());
  for_each_row(a.cols(), exec, [&](std::size_t i) { matmul_tn_row(a, b, c, i); });
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b, Exec exec) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: column counts differ (" + a.shape_str() + " * " +
                     b.shape_str() + "^T)");
  }
  Matrix c(a.rows(), b.rows());
  for_each_row(a.rows(), exec, [&](std::size_t i) { matmul_nt_row(a, b, c, i); });
  return c;
}

}  // namespace xpert

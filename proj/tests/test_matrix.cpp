// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "oracles.hpp"
#include "xpert/errors.hpp"
#include "xpert/kernels.hpp"
#include "xpert/matrix.hpp"

namespace xpert {
namespace {

TEST(Matrix, RejectsZeroDimensions) {
  EXPECT_THROW(Matrix(0, 3), ShapeError);
  EXPECT_THROW(Matrix(2, 0), ShapeError);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>(3)), ShapeError);
}

TEST(Matrix, InitializerListAndAccess) {
  const Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(transpose(m), (Matrix{{1, 4}, {2, 5}, {3, 6}}));
}

TEST(Matrix, ElementwiseShapeMismatchThrows) {
  EXPECT_THROW(add(Matrix(2, 2), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(hadamard(Matrix(2, 2), Matrix(3, 2)), ShapeError);
}

TEST(Matrix, Norms) {
  const Matrix m{{3, 0}, {4, 1}};
  EXPECT_EQ(column_norms(m), (std::vector<double>{5.0, 1.0}));
  EXPECT_DOUBLE_EQ(row_norms(m)[1], std::sqrt(17.0));
  EXPECT_EQ(frobenius_sq(m), 26.0);
  EXPECT_TRUE(is_binary(Matrix{{0, 1}, {1, 1}}));
  EXPECT_FALSE(is_binary(Matrix{{0, 0.5}}));
}

TEST(Kernels, MatmulAgreesWithNaiveProduct) {
  test::Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = rng.matrix(rng.index(1, 17), rng.index(1, 17));
    const auto b = rng.matrix(a.cols(), rng.index(1, 17));
    const auto want = test::naive_matmul(a, b);
    EXPECT_LE(max_abs_diff(matmul(a, b), want), 1e-12);
    EXPECT_LE(max_abs_diff(matmul_tn(transpose(a), b), want), 1e-12);
    EXPECT_LE(max_abs_diff(matmul_nt(a, transpose(b)), want), 1e-12);
  }
}

TEST(Kernels, InnerDimensionMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
  EXPECT_THROW(matmul_tn(Matrix(2, 3), Matrix(3, 3)), ShapeError);
  EXPECT_THROW(matmul_nt(Matrix(2, 3), Matrix(2, 2)), ShapeError);
}

TEST(Kernels, SerialAndParallelAreBitwiseEqual) {
  set_num_threads(4);
  test::Rng rng(2);
  const auto a = rng.matrix(65, 33);
  const auto b = rng.matrix(33, 47);
  EXPECT_EQ(matmul(a, b, Exec::serial), matmul(a, b, Exec::parallel));
  const auto c = rng.matrix(65, 9);
  EXPECT_EQ(matmul_tn(a, c, Exec::serial), matmul_tn(a, c, Exec::parallel));
  const auto d = rng.matrix(12, 33);
  EXPECT_EQ(matmul_nt(a, d, Exec::serial), matmul_nt(a, d, Exec::parallel));
  set_num_threads(1);
}

}  // namespace
}  // namespace xpert

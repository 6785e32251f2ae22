// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>

#include "xpert/kernels.hpp"

namespace xpert::detail {

// Runs fn(i) for every i in [0, rows). Iterations must write disjoint outputs.
template <typename RowFn>
void for_each_row(std::size_t rows, Exec exec, RowFn&& fn) {
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < rows; ++i) fn(i);
    return;
  }
  const auto n = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) fn(static_cast<std::size_t>(i));
}

}  // namespace xpert::detail

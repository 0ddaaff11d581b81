// Copyright (c) 2026 msunet contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>

#include "msunet/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace msunet {

/// Runs fn(begin, end) over [0, n) in disjoint chunks. Chunk boundaries are a
/// pure function of n and the configured thread count, and every element is
/// produced by exactly one chunk, so results are bit-identical across runs.
template <typename F>
void parallel_for(int64_t n, int64_t grain, F&& fn) {
  if (n <= 0) return;
  const int threads = runtime::num_threads();
  if (threads <= 1 || n < 2 * grain) {
    fn(int64_t{0}, n);
    return;
  }
#ifdef _OPENMP
  const int nchunks = static_cast<int>(std::min<int64_t>(threads, (n + grain - 1) / grain));
#pragma omp parallel for num_threads(nchunks) schedule(static)
  for (int c = 0; c < nchunks; ++c) {
    const int64_t b = n * c / nchunks;
    const int64_t e = n * (c + 1) / nchunks;
    fn(b, e);
  }
#else
  fn(int64_t{0}, n);
#endif
}

}  // namespace msunet

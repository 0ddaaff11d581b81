// Copyright (c) 2026 msunet contributors
// SPDX-License-Identifier: Apache-2.0
#include "msunet/common.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>

namespace msunet::runtime {

namespace {

bool env_deterministic() {
  const char* v = std::getenv("MSUNET_DETERMINISTIC");
  return v != nullptr && v[0] == '1';
}

int env_threads() {
  if (const char* v = std::getenv("MSUNET_THREADS")) {
    int n = std::atoi(v);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::atomic<bool> g_deterministic{env_deterministic()};
std::atomic<int> g_threads{env_threads()};

}  // namespace

bool deterministic() { return g_deterministic.load(std::memory_order_relaxed); }
void set_deterministic(bool on) { g_deterministic.store(on, std::memory_order_relaxed); }

int num_threads() {
  if (deterministic()) return 1;
  return g_threads.load(std::memory_order_relaxed);
}
void set_num_threads(int n) {
  if (n > 0) g_threads.store(n, std::memory_order_relaxed);
}

}  // namespace msunet::runtime

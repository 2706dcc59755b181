#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace store3d {

// Thread cap: min(hardware, STORE3D_THREADS). Results are written to fixed
// indices, so outputs stay deterministic at any thread count.
inline int thread_limit() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("STORE3D_THREADS")) {
    long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) return static_cast<int>(std::min<long>(cap, hw));
  }
  return static_cast<int>(hw);
}

// Index-based parallel map; results land at fixed indices so output ordering
// is independent of scheduling.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  int threads = std::min(thread_limit(), std::max(1, n));
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      int i;
      while ((i = next.fetch_add(1)) < n) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace store3d

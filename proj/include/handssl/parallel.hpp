#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace handssl {

// Runs fn(i) for i in [0, n) across a couple of worker threads.
// Work is claimed in fixed index order and every index is processed by
// exactly one worker with no shared accumulation, so results do not depend
// on the thread count or scheduling.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  const unsigned hw = std::thread::hardware_concurrency();
  const int workers = int(std::min<unsigned>(hw == 0 ? 1 : hw, 4));
  if (n <= 1 || workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto run = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(size_t(workers) - 1);
  for (int t = 1; t < workers; ++t) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
}

}  // namespace handssl

#pragma once

#include <atomic>
#include <thread>
#include <vector>

namespace ctmle {

/// Runs fn(0..n_tasks-1) on up to `threads` workers pulling from a shared
/// counter. Task decomposition is independent of the worker count, so any
/// per-task outputs keyed by task index are reproducible.
template <typename Fn>
void parallel_tasks(long n_tasks, int threads, Fn&& fn) {
  if (n_tasks <= 0) return;
  if (threads <= 1 || n_tasks == 1) {
    for (long t = 0; t < n_tasks; ++t) fn(t);
    return;
  }
  std::atomic<long> next{0};
  const int workers = static_cast<int>(std::min<long>(threads, n_tasks));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (long t = next.fetch_add(1); t < n_tasks; t = next.fetch_add(1)) fn(t);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace ctmle

#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dofkit {

inline unsigned default_thread_count() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1u : n;
}

// Runs compute(b) for b in [0, count) on up to `threads` workers and hands each
// result to commit(b, result) strictly in ascending b. The partition is fixed
// by the caller, so the commit order (and therefore every floating-point
// reduction done inside commit) does not depend on the thread count.
template <typename Compute, typename Commit>
void ordered_parallel_for(int count, unsigned threads, Compute compute, Commit commit) {
  if (count <= 0) return;
  if (threads == 0) threads = default_thread_count();
  threads = std::min<unsigned>(threads, static_cast<unsigned>(count));

  if (threads <= 1) {
    for (int b = 0; b < count; ++b) commit(b, compute(b));
    return;
  }

  std::atomic<int> next{0};
  std::mutex mutex;
  std::condition_variable turn;
  int next_commit = 0;
  std::exception_ptr failure;
  bool aborted = false;

  auto worker = [&] {
    for (;;) {
      const int b = next.fetch_add(1);
      if (b >= count) return;
      try {
        auto result = compute(b);
        std::unique_lock lock(mutex);
        turn.wait(lock, [&] { return next_commit == b || aborted; });
        if (aborted) return;
        commit(b, std::move(result));
        ++next_commit;
        turn.notify_all();
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
        aborted = true;
        turn.notify_all();
        return;
      }
    }
  };

  std::vector<std::jthread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace dofkit

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace lics {

// Fixed-fanout batch partitioning. Chunk boundaries depend only on the batch
// size, never on the machine, so per-chunk results can be reduced in chunk
// order and stay bitwise reproducible at any thread count.
inline constexpr int kBatchChunks = 8;

struct ChunkRange {
  int begin = 0;
  int end = 0;  // exclusive
};

inline std::vector<ChunkRange> chunk_ranges(int n, int chunks = kBatchChunks) {
  std::vector<ChunkRange> out;
  if (n <= 0) return out;
  int k = std::min(chunks, n);
  int base = n / k, rem = n % k;
  int pos = 0;
  for (int i = 0; i < k; ++i) {
    int len = base + (i < rem ? 1 : 0);
    out.push_back({pos, pos + len});
    pos += len;
  }
  return out;
}

inline int worker_count() {
  if (const char* env = std::getenv("LICS_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(chunk_index, range) for every chunk. Exceptions are rethrown on the
// calling thread (first chunk index wins).
inline void parallel_chunks(int n, const std::function<void(int, ChunkRange)>& fn,
                            int chunks = kBatchChunks) {
  auto ranges = chunk_ranges(n, chunks);
  if (ranges.empty()) return;
  int workers = std::min<int>(worker_count(), static_cast<int>(ranges.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < ranges.size(); ++i)
      fn(static_cast<int>(i), ranges[i]);
    return;
  }
  std::vector<std::exception_ptr> errs(ranges.size());
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        int i = next.fetch_add(1);
        if (i >= static_cast<int>(ranges.size())) break;
        try {
          fn(i, ranges[static_cast<std::size_t>(i)]);
        } catch (...) {
          errs[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace lics

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace k4 {

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
  static std::atomic<unsigned> n{0};
  return n;
}
}  // namespace detail

// Worker count for internal data-parallel loops. 0 means: K4_THREADS, else the
// hardware concurrency. Results never depend on the worker count.
inline void set_num_threads(unsigned n) { detail::thread_setting().store(n); }

inline unsigned num_threads() {
  if (unsigned n = detail::thread_setting().load(); n > 0) return n;
  if (const char* env = std::getenv("K4_THREADS")) {
    try {
      if (int v = std::stoi(env); v > 0) return static_cast<unsigned>(v);
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(begin, end) over contiguous blocks of [0, n). Every index is handled
// by exactly one call, so per-index outputs do not depend on the thread count.
template <typename Fn>
void parallel_blocks(std::size_t n, std::size_t block, Fn&& fn) {
  if (n == 0) return;
  block = std::max<std::size_t>(block, 1);
  const std::size_t nblocks = (n + block - 1) / block;
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(num_threads(), nblocks));
  if (workers <= 1) {
    for (std::size_t b = 0; b < nblocks; ++b) fn(b * block, std::min(n, (b + 1) * block));
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t b = next.fetch_add(1);
        if (b >= nblocks) return;
        try {
          fn(b * block, std::min(n, (b + 1) * block));
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t block = 64) {
  parallel_blocks(n, block, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace k4

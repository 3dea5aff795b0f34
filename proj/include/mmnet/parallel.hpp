#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace mmnet {

namespace detail {
inline std::atomic<int> num_threads{1};
}

/// Worker count used for intra-op parallelism. 1 (the default) is fully
/// sequential; any fixed count gives bitwise-reproducible results.
inline void set_num_threads(int n) { detail::num_threads = std::max(1, n); }
inline int num_threads() { return detail::num_threads; }

/// Splits [0, n) into num_threads() contiguous chunks and runs
/// body(chunk_index, begin, end) for each. Chunk boundaries depend only on n
/// and the thread count.
template <class F>
void parallel_chunks(std::size_t n, F&& body) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n);
  if (workers <= 1) {
    if (n > 0) body(std::size_t{0}, std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t base = n / workers;
  const std::size_t extra = n % workers;
  std::size_t begin = 0;
  std::size_t first_end = 0;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t end = begin + base + (w < extra ? 1 : 0);
    if (w == 0) {
      first_end = end;
    } else {
      pool.emplace_back([&body, w, begin, end] { body(w, begin, end); });
    }
    begin = end;
  }
  body(std::size_t{0}, std::size_t{0}, first_end);
  for (auto& t : pool) t.join();
}

inline std::size_t chunk_count(std::size_t n) {
  return std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n));
}

}  // namespace mmnet

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace xd {

/// Worker cap for kernels. Read once from XDOPS_THREADS, else hardware cores.
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Runs f(begin, end) over contiguous chunks of [0, count). Chunk boundaries
/// depend only on count and the thread cap, so any per-chunk reduction the
/// caller performs is reproducible.
template <class F>
void parallel_for(std::size_t count, std::size_t min_chunk, F&& f) {
  const std::size_t workers = std::min(thread_count(), count / std::max<std::size_t>(min_chunk, 1));
  if (workers <= 1) {
    if (count) f(std::size_t{0}, count);
    return;
  }
  const std::size_t chunk = (count + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(count, b + chunk);
    if (b < e) pool.emplace_back([&f, b, e] { f(b, e); });
  }
  f(std::size_t{0}, std::min(count, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace xd

// SPDX-License-Identifier: Apache-2.0
#include "xdops/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace xd {
namespace {

std::size_t from_env() {
  if (const char* v = std::getenv("XDOPS_THREADS")) {
    try {
      const long n = std::stol(v);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::atomic<std::size_t>& cap() {
  static std::atomic<std::size_t> value{from_env()};
  return value;
}

}  // namespace

std::size_t thread_count() { return cap().load(std::memory_order_relaxed); }
void set_thread_count(std::size_t n) { cap().store(std::max<std::size_t>(n, 1), std::memory_order_relaxed); }

}  // namespace xd

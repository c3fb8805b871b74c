#pragma once

#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace sdelearn {

inline unsigned thread_count() {
  if (const char* env = std::getenv("SDELEARN_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Runs body(i) for i in [0, n). Work is split into contiguous chunks, one per
// thread; callers must write results only to slot i so the outcome is
// independent of scheduling.
template <class F>
void parallel_for(std::size_t n, F&& body, unsigned n_threads = 0) {
  if (n == 0) return;
  unsigned t = n_threads ? n_threads : thread_count();
  if (t > n) t = static_cast<unsigned>(n);
  if (t <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr error;
  std::vector<std::thread> workers;
  workers.reserve(t);
  const std::size_t chunk = (n + t - 1) / t;
  for (unsigned w = 0; w < t; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([&, lo, hi] {
      try {
        for (std::size_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : workers) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace sdelearn

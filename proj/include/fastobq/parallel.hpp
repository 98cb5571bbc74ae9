#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

namespace fastobq {

/// Worker count for row-parallel loops. `requested` > 0 wins; otherwise
/// FASTOBQ_THREADS (0 = auto) and finally the hardware concurrency.
inline unsigned resolve_threads(unsigned requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("FASTOBQ_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Contiguous [begin, end) slice of `n` items for worker `w` of `workers`.
inline std::pair<Eigen::Index, Eigen::Index> slice(Eigen::Index n, unsigned w, unsigned workers) {
  const Eigen::Index base = n / workers;
  const Eigen::Index extra = n % workers;
  const Eigen::Index begin = w * base + std::min<Eigen::Index>(w, extra);
  const Eigen::Index end = begin + base + (static_cast<Eigen::Index>(w) < extra ? 1 : 0);
  return {begin, end};
}

/// Runs fn(begin, end) over disjoint slices of [0, n). Slices are fixed by
/// (n, workers) alone, so per-item results never depend on scheduling.
template <typename Fn>
void parallel_for(Eigen::Index n, unsigned workers, Fn&& fn) {
  workers = static_cast<unsigned>(std::clamp<Eigen::Index>(workers, 1, std::max<Eigen::Index>(n, 1)));
  if (workers == 1) {
    fn(Eigen::Index{0}, n);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (unsigned w = 1; w < workers; ++w) {
      const auto [b, e] = slice(n, w, workers);
      pool.emplace_back([&fn, &errors, w, b, e] {
        try {
          fn(b, e);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    const auto [b0, e0] = slice(n, 0, workers);
    try {
      fn(b0, e0);
    } catch (...) {
      errors[0] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace fastobq

#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace hspec {

/// Worker count from HSPEC_WORKERS; defaults to 1.
inline int worker_count() {
  if (const char* env = std::getenv("HSPEC_WORKERS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (...) {
    }
  }
  return 1;
}

/// Runs body(i) for i in [0, n) on up to `workers` threads. Each index is
/// executed exactly once; results must be written to per-index slots.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& body) {
  workers = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  // lowest worker index wins so the reported error does not depend on timing
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Pairwise tree sum over partials; the association order depends only on
/// the number of partials, so results are independent of thread count.
inline Eigen::VectorXd pairwise_sum(std::vector<Eigen::VectorXd> parts) {
  if (parts.empty()) return {};
  while (parts.size() > 1) {
    std::vector<Eigen::VectorXd> next;
    next.reserve((parts.size() + 1) / 2);
    for (std::size_t i = 0; i + 1 < parts.size(); i += 2) next.push_back(parts[i] + parts[i + 1]);
    if (parts.size() % 2 == 1) next.push_back(std::move(parts.back()));
    parts = std::move(next);
  }
  return std::move(parts.front());
}

}  // namespace hspec

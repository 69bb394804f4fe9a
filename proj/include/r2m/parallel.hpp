#pragma once

#include <cstddef>
#include <functional>

namespace r2m {

/// Worker count from R2M_THREADS (default 1).
std::size_t thread_count();

/// Runs fn(i) for i in [0, n). Callers write results into per-index slots
/// and reduce them in index order, so output never depends on thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace r2m

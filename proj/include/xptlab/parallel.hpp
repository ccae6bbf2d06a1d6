#pragma once

#include <cstddef>
#include <functional>

namespace xptlab {

/// Worker cap: XPTLAB_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t thread_budget();

/// Runs fn(i) for i in [0, n) on up to thread_budget() threads. Each index
/// runs exactly once; results must be written to per-index slots. The first
/// exception thrown (lowest index) is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace xptlab

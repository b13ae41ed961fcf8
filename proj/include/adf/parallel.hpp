#pragma once

#include <cstddef>
#include <functional>

namespace adf {

/// Worker count: ADF_THREADS when set to a positive integer, otherwise the
/// hardware concurrency.
std::size_t thread_count();

/// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; callers
/// write results into per-index slots so the outcome does not depend on the
/// number of threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace adf

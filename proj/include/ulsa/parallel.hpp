#pragma once

#include <cstddef>
#include <functional>

namespace ulsa {

/// Worker-thread cap: ULSA_THREADS if set, else hardware concurrency.
std::size_t worker_threads();

/// Runs fn(i) for i in [0, n) on up to worker_threads() threads. Callers
/// must make fn(i) depend only on i (per-index RNG streams), which keeps
/// results independent of the thread count. The first exception thrown
/// by any worker is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ulsa

#pragma once

#include <cstdint>
#include <functional>

namespace metaseld {

/// Process-wide worker count for batch-level parallelism. 1 = fully serial.
/// Work items are independent and reductions happen in index order after the
/// join, so results are identical for every worker count.
int& worker_threads();

/// Runs fn(i) for i in [0, n) on up to worker_threads() threads.
/// Exceptions from workers are rethrown on the calling thread.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace metaseld

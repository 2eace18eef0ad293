#pragma once

#include <cstddef>
#include <functional>

namespace calibra {

// 0 means: CALIBRA_THREADS if set, else hardware concurrency.
int resolve_threads(int requested);

// Runs body(i) for i in [0, count) on up to `threads` workers. Each index
// runs exactly once; callers write results into per-index slots so the
// output does not depend on the worker count. The first exception thrown
// by any body is rethrown after all workers join.
void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& body);

}  // namespace calibra

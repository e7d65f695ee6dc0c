#pragma once

#include <cstddef>
#include <functional>

namespace ctxguard {

/// Worker count: CTXGUARD_THREADS when set and positive, else hardware concurrency.
std::size_t thread_count();

/// Runs body(i) for i in [0, n) on up to thread_count() workers. Callers write
/// results into per-index slots and reduce afterwards in index order, so the
/// outcome never depends on the worker count. The first exception thrown by any
/// body is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace ctxguard

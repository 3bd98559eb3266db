#pragma once

#include <cstddef>
#include <functional>

namespace diffuse {

/// Process-wide worker cap. Defaults to $DIFFUSE_THREADS, else hardware concurrency.
std::size_t thread_cap();
void set_thread_cap(std::size_t n);

/// Runs fn(i) for i in [0, n) on up to thread_cap() workers. Work is split
/// into contiguous chunks; callers write results by index so the outcome
/// does not depend on scheduling. The first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace diffuse

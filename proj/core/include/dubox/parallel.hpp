#pragma once

#include <cstddef>
#include <functional>

namespace dubox {

// Number of worker threads used for intra-op parallelism. Read once from the
// DUBOX_THREADS environment variable; defaults to the hardware concurrency.
std::size_t thread_count();

// Overrides the thread cap (0 restores the environment/default value).
void set_thread_count(std::size_t n);

// Calls fn(i) for i in [0, n). Work is split into contiguous chunks, one per
// thread. Callers must make each fn(i) write to disjoint memory; results are
// then independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace dubox

// Deterministic fork-join helper. Work is split into contiguous index
// ranges; each index is processed by exactly one thread and any reduction
// happens after the join, in ascending index order. Output therefore never
// depends on the thread count.

#pragma once

#include <functional>

namespace fvlab {

// Effective parallelism: min(FVLAB_THREADS or hardware_concurrency, override).
int thread_cap();

// Overrides the FVLAB_THREADS environment lookup for this process (0 = off).
void set_thread_cap(int cap);

// Calls fn(i) for every i in [0, n), split across up to thread_cap() threads.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace fvlab

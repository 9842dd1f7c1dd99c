#pragma once

namespace curvecov {

// Number of OpenMP threads to use; clamps to the CURVECOV_THREADS environment
// variable when set. Parallel regions must not change numerical results:
// every kernel writes to disjoint slots or reduces in a fixed serial order.
int thread_count();

}  // namespace curvecov

#pragma once

#include <cstddef>
#include <functional>

namespace vx {

// Number of worker threads used by heavy kernels (matmul, conv, dft).
int max_threads();

// Set the worker count; 1 disables the pool entirely. Values < 1 reset to
// the hardware default. Not safe to call while a parallel_for is running.
void set_max_threads(int n);

// Runs fn(begin, end) over contiguous chunks of [0, n). Each index is
// processed by exactly one chunk with the same sequential inner order, so
// results are bitwise identical for any thread count. fn must only write to
// disjoint locations per index.
void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace vx

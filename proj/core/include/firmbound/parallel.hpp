#pragma once

#include <cstddef>
#include <functional>

namespace firmbound {

// Process-wide cap on worker threads. 0 means "use hardware concurrency".
void set_max_threads(std::size_t n);
std::size_t max_threads();

// Runs body(i) for i in [0, n). Work is split into contiguous chunks; the
// body must only write to slots owned by index i so results are independent
// of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace firmbound

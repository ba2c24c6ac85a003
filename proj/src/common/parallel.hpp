#pragma once

#include <cstddef>
#include <functional>

namespace voxelseg {

/// Worker count used by parallel_for. 1 runs everything on the caller.
void set_thread_count(int n);
int thread_count() noexcept;

/// Runs task(i) for every i in [0, n). Tasks must write disjoint outputs;
/// callers that reduce across tasks keep per-task partials and combine
/// them in index order, so results never depend on the thread count.
/// Nested calls from inside a task run serially.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& task);

}  // namespace voxelseg

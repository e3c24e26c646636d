#pragma once

#include <cstddef>
#include <functional>

namespace cadp {

/// Worker cap for evaluation-side loops. Defaults to 1; the CLI sets it from
/// CADP_THREADS. Training never runs in parallel.
void set_worker_threads(std::size_t n);
std::size_t worker_threads();

/// Runs task(i) for i in [0, n). Tasks must write disjoint outputs; results
/// are then identical for any worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& task);

}  // namespace cadp

#pragma once

#include <cstddef>
#include <functional>

namespace marf {

/// Worker count used by parallel_for; defaults to the hardware concurrency.
int thread_count();
void set_thread_count(int n);

/// Runs fn(i) for i in [0, n) over contiguous static chunks. Every index is
/// handled by exactly one worker, so results do not depend on the thread count
/// as long as fn only writes slot i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace marf

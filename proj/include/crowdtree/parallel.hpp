#pragma once

#include <cstddef>
#include <functional>

namespace crowdtree {

/// Worker count used by parallel_for. Results never depend on it: every
/// index writes only its own output slot.
void set_num_threads(std::size_t n);
std::size_t num_threads();

/// Runs fn(i) for i in [0, n), statically chunked over num_threads() workers.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace crowdtree

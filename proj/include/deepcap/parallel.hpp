#pragma once

#include <cstddef>
#include <functional>

namespace deepcap {

// Worker count used by parallel_for. Defaults to 1 (single core).
void set_num_threads(int n);
int num_threads();

// Runs fn(i) for i in [begin, end). Indices are split into contiguous chunks,
// one per worker; fn must only write state owned by index i. Calls made from
// inside a worker run serially.
void parallel_for(std::size_t begin, std::size_t end, const std::function<void(std::size_t)>& fn);

}  // namespace deepcap

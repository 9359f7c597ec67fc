#pragma once

#include <cstddef>
#include <functional>

namespace somer {

/// Splits [0, n) into `workers` contiguous chunks and runs `body(begin, end, worker)` on each.
/// Chunk boundaries depend only on (n, workers). With workers <= 1 everything runs inline.
/// The first exception thrown by any chunk is rethrown after all chunks finish.
void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t begin, std::size_t end, std::size_t worker)>& body);

/// Number of chunks parallel_for will actually use.
std::size_t effective_workers(std::size_t n, std::size_t workers);

}  // namespace somer

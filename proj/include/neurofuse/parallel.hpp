#pragma once

#include <cstddef>
#include <functional>

namespace neurofuse {

/// Runs task(i) for i in [0, n) on up to `jobs` threads (inline when jobs <= 1).
/// Tasks must write results by index so scheduling cannot change outcomes.
/// The exception of the lowest failing index is rethrown after all finish.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& task);

}  // namespace neurofuse

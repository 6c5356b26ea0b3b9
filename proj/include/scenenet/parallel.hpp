#pragma once

#include <cstddef>
#include <functional>

namespace scenenet {

/// Strict mode forces every parallel loop to run serially in index order.
void set_strict_determinism(bool strict);
bool strict_determinism();

/// Worker cap: SCENENET_THREADS when set, otherwise hardware concurrency.
/// Always 1 in strict mode.
std::size_t worker_count();

/// Runs body(i) for i in [0, n). Bodies must write disjoint outputs, which
/// keeps parallel and serial execution bit-identical.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace scenenet

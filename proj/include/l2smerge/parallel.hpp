// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace l2smerge {

/// Process-wide worker count used by every parallel loop.
/// Resolution order: set_thread_count(), then env L2SMERGE_THREADS, then hardware concurrency.
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Runs body(i) for i in [0, n). Each index runs exactly once; callers must
/// write only to per-index slots so output never depends on scheduling.
/// The first exception thrown by any body is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

} // namespace l2smerge

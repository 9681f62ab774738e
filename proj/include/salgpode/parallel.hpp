#pragma once

#include <cstddef>
#include <functional>

namespace salgpode {

/// Worker count: SALGPODE_THREADS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
unsigned worker_count();

/// Calls body(i) for i in [0, n). Work is distributed over worker_count()
/// threads; callers write results by index so the outcome does not depend on
/// scheduling. The first exception thrown by any body is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace salgpode

#pragma once

#include <cstdint>
#include <functional>

namespace procformer {

/// Process-wide worker count for kernel-level parallelism. Defaults to 1;
/// the CLI sets it from --threads / PROCFORMER_THREADS. Results never depend
/// on the value: work is partitioned across output elements only, so each
/// element is always computed by exactly one worker in a fixed order.
void set_num_threads(int n);
int num_threads();

/// Run fn over contiguous sub-ranges covering [0, n). With one worker (or a
/// small n) this is a plain inline call. grain is the minimum number of
/// iterations per worker before fanning out: the default suits elementwise
/// loops; pass 1 when each iteration is a heavy unit (e.g. one micro-batch).
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);
void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn);

} // namespace procformer

#pragma once

#include <cstddef>
#include <functional>

namespace bubbleformer {

/// Worker cap: BUBBLEBENCH_THREADS when set to a positive integer, otherwise
/// the hardware concurrency (at least 1).
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on up to `max_workers` threads (0 = worker_count()).
/// The exception thrown for the smallest index is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t max_workers = 0);

/// Keeps large freed blocks in the heap so per-step activations do not page-fault
/// on every allocation. No-op outside glibc.
void tune_allocator();

/// Flushes subnormal floats to zero on the calling thread (x86 SSE; no-op
/// elsewhere). Softmax tails underflow into subnormals once attention logits
/// grow during training, and arithmetic on them is 2-3x slower per step.
/// parallel_for workers inherit the caller's setting.
void flush_denormals();

}  // namespace bubbleformer

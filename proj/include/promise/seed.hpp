#pragma once

#include <cstdint>

namespace promise {

/// SplitMix64 finaliser; decorrelates structured seed inputs.
constexpr uint64_t mix_seed(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Per-draw seed for (global seed, worker, iteration, purpose tag).
constexpr uint64_t derive_seed(uint64_t global, uint64_t worker, uint64_t iteration, uint64_t tag = 0) {
    return mix_seed(mix_seed(mix_seed(mix_seed(global) ^ worker) ^ iteration) ^ tag);
}

} // namespace promise

// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace mustdrop {

/// Deterministic random source based on the splitmix64 recurrence.
///
/// The stream depends only on the seed, so two builds (or two languages)
/// that consume values in the same order see the same numbers bit for bit.
class SeededSource {
public:
    explicit SeededSource(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform value in [-1, 1): the high 63 bits of the raw draw divided
    /// by 2^63, minus 1.
    double next_uniform() {
        const std::uint64_t high = next_u64() >> 1;
        return static_cast<double>(high) / 4611686018427387904.0 - 1.0;  // 2^62
    }

    /// Uniform integer in [0, bound). bound must be > 0.
    std::uint64_t next_below(std::uint64_t bound) { return next_u64() % bound; }

private:
    std::uint64_t state_;
};

/// Stable derivation of per-purpose seeds from a run seed, so independent
/// streams (weights, fixture content, needle retries) never alias.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    SeededSource src(base ^ (0x9E3779B97F4A7C15ULL * (tag + 1)));
    return src.next_u64();
}

}  // namespace mustdrop

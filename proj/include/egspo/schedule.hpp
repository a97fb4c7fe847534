#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace egspo {

/// Noise schedule for the forward masking process. alpha(t) is the keep
/// probability at step t: strictly decreasing, alpha(0)=1, alpha(T)=0 for
/// the default linear schedule alpha_t = 1 - t/T.
struct NoiseSchedule {
    int total_steps = 0;

    explicit NoiseSchedule(int T) : total_steps(T) {
        if (T < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
    }

    double alpha(int t) const {
        if (t < 0 || t > total_steps) throw std::out_of_range("NoiseSchedule: t outside [0, T]");
        return 1.0 - static_cast<double>(t) / static_cast<double>(total_steps);
    }
};

enum class UnmaskMode {
    fixed_order,   // lowest-index masked positions first
    seeded_random, // pseudo-random order from the schedule's own seed
    confidence,    // highest max-logit positions first (theta-dependent)
};

/// Policy for choosing which masked positions to reveal at each reverse step.
/// The order produced by fixed_order / seeded_random depends only on the mask
/// pattern (never on model outputs), which the enumeration oracles rely on.
struct UnmaskSchedule {
    UnmaskMode mode = UnmaskMode::fixed_order;
    int tokens_per_step = 1;
    int block_size = 0;          // 0 = no block restriction
    std::uint64_t seed = 0;      // used by seeded_random only

    bool theta_independent() const { return mode != UnmaskMode::confidence; }
};

} // namespace egspo

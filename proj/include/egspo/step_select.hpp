#pragma once

#include <cstdint>
#include <vector>

#include "egspo/pg.hpp"
#include "egspo/rng.hpp"

namespace egspo {

enum class SelectStrategy { entropy_topk, uniform, random };

struct StepSelection {
    SelectStrategy strategy = SelectStrategy::entropy_topk;
    int budget = 0;            // K
    std::vector<int> selected; // step indices, sorted ascending
};

/// The K steps with the largest entropy. Ties break toward the smaller
/// diffusion index. Steps with zero-size unmask sets are not selectable, so
/// callers pass -1 (or any negative entropy) to exclude them.
StepSelection select_steps_entropy(const std::vector<double>& entropies, int budget);

/// Evenly spaced steps {floor(k*T/K)}, deduplicated.
StepSelection select_steps_uniform(int total_steps, int budget);

/// K distinct steps drawn uniformly without replacement.
StepSelection select_steps_random(int total_steps, int budget, Rng& rng);

/// Exhaustively checks that the greedy top-K choice minimizes the excluded
/// entropy mass over every subset of size <= K. Brute force over 2^T
/// subsets; refuses T > 16.
bool verify_subset_optimality(const std::vector<double>& entropies, int budget);

/// Gradient truncation error versus its entropy surrogate on one instance.
struct ErrorBoundReport {
    double delta_s = 0.0;               // || sum_{t not in S} grad J_t ||
    double bound = 0.0;                 // B * sum_{t not in S} H_t
    double grad_bound = 0.0;            // B
    std::vector<double> entropies;      // expected per-step entropies
    bool holds() const { return delta_s <= bound + 1e-12; }
};

/// Exact evaluation of the entropy error bound: per-step gradients, the
/// logit-gap norm bound B over every reachable state, and expected step
/// entropies all come from full enumeration. Rewards must lie in [0, 1].
ErrorBoundReport verify_lemma_bound(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                    const RewardFn& reward, const UnmaskSchedule& unmask, double temperature,
                                    const std::vector<int>& selected_steps, const EnumLimits& limits = {});

/// Entropy bound for a single softmax step: enumerates the outcomes of
/// unmasking U at x_next and checks
///   || E[A_i grad log pi_i] || <= H(pi) * max|A_i| * ||grad g||
/// plus the per-outcome score bound
///   || grad log pi_i || <= (1 - pi_i) ||grad g|| <= (-log pi_i) ||grad g||,
/// where ||grad g|| is the max pairwise joint logit-gap gradient norm.
bool verify_prop1(const DenoiserModel& model, const MaskedSequence& x_next, const std::vector<int>& unmask_positions,
                  const std::vector<double>& advantages, double temperature = 1.0);

} // namespace egspo

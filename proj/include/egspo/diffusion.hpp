#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "egspo/denoiser.hpp"
#include "egspo/rng.hpp"
#include "egspo/schedule.hpp"
#include "egspo/vocab.hpp"

namespace egspo {

/// One reverse transition x_{t+1} -> x_t. `t` is the diffusion index
/// (T-1 down to 0); empty unmask sets mark padding steps after every mask
/// has been revealed.
struct TrajectoryStep {
    int t = 0;
    std::vector<int> unmask_positions;
    std::vector<Token> chosen;
    double log_prob = 0.0;
    double entropy = 0.0;
    std::vector<Token> greedy_completion; // argmax fill of x_{t+1}, cached from this step's logits
};

struct Trajectory {
    std::vector<Token> query;
    std::vector<MaskedSequence> states; // x_T .. x_0, size T+1
    std::vector<TrajectoryStep> steps;  // ordered t = T-1 .. 0

    const MaskedSequence& final_state() const { return states.back(); }
    int total_steps() const { return static_cast<int>(steps.size()); }

    int nonempty_step_count() const {
        int n = 0;
        for (const auto& s : steps) n += s.unmask_positions.empty() ? 0 : 1;
        return n;
    }

    /// Per-step entropies H_t indexed by position in `steps` (t = T-1 first).
    std::vector<double> step_entropies() const {
        std::vector<double> out;
        out.reserve(steps.size());
        for (const auto& s : steps) out.push_back(s.entropy);
        return out;
    }
};

/// Forward masking q^{t|0}: each position of a clean sequence is kept with
/// probability alpha_t, otherwise replaced by the mask token.
MaskedSequence forward_mask(const MaskedSequence& x0, int t, const NoiseSchedule& schedule, Rng& rng);

/// Positions to reveal at the next reverse step: min(tokens_per_step,
/// remaining) masked positions, picked per the schedule mode. `logits` is
/// only consulted in confidence mode. `response_begin` anchors block
/// boundaries (blocks partition the response region).
std::vector<int> select_unmask_positions(const MaskedSequence& x_next, const LogitTable* logits,
                                         const UnmaskSchedule& schedule, Rng& rng, int response_begin = 0);

struct ReverseStepResult {
    MaskedSequence x_t;
    double log_prob = 0.0;
    double entropy = 0.0;
};

/// Sample tokens at the positions in U from softmax(logits/temperature);
/// everything outside U is copied verbatim.
ReverseStepResult reverse_step(const MaskedSequence& x_next, std::span<const int> unmask_positions,
                               const LogitTable& logits, double temperature, Rng& rng);

struct RolloutOptions {
    double temperature = 1.0;
    bool greedy = false;           // argmax instead of sampling (evaluation decoding)
    bool record_entropies = true;
    std::uint64_t* forward_passes = nullptr; // incremented per model evaluation when set
};

/// Full reverse process: starts from the clean prompt plus an all-mask
/// response region and applies reverse steps for t = T-1 .. 0. Steps after
/// the last mask has been revealed are recorded with empty unmask sets.
Trajectory rollout(const DenoiserModel& model, const std::vector<Token>& prompt, int response_len,
                   int total_steps, const UnmaskSchedule& unmask, Rng& rng, const RolloutOptions& opts = {});

/// Initial state x_T for a prompt: clean prefix followed by response_len
/// mask tokens.
MaskedSequence initial_state(const std::vector<Token>& prompt, int response_len, int vocab_size);

/// The deterministic sequence of unmask sets implied by a theta-independent
/// schedule, given the starting mask pattern. Enumeration oracles and
/// rollouts under fixed_order / seeded_random share this plan. Throws for
/// confidence mode.
std::vector<std::vector<int>> plan_unmask_sequence(const MaskedSequence& start, const UnmaskSchedule& schedule,
                                                   int response_begin = 0);

} // namespace egspo

#include "egspo/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace egspo {

MaskedSequence forward_mask(const MaskedSequence& x0, int t, const NoiseSchedule& schedule, Rng& rng) {
    if (!x0.is_clean()) throw std::invalid_argument("forward_mask: input must be clean");
    if (t < 0 || t > schedule.total_steps) throw std::out_of_range("forward_mask: t outside [0, T]");
    const double alpha = schedule.alpha(t);
    MaskedSequence out = x0;
    for (int l = 0; l < out.length(); ++l) {
        if (uniform01(rng) >= alpha) out.tokens[static_cast<std::size_t>(l)] = out.mask;
    }
    return out;
}

std::vector<int> select_unmask_positions(const MaskedSequence& x_next, const LogitTable* logits,
                                         const UnmaskSchedule& schedule, Rng& rng, int response_begin) {
    std::vector<int> candidates = x_next.masked_positions();
    if (candidates.empty()) throw std::invalid_argument("select_unmask_positions: no masked positions");

    if (schedule.block_size > 0) {
        // restrict to the lowest-index response block that still has masks
        const int first = candidates.front();
        const int block = (first - response_begin) / schedule.block_size;
        const int lo = response_begin + block * schedule.block_size;
        const int hi = lo + schedule.block_size;
        std::vector<int> in_block;
        for (int p : candidates)
            if (p >= lo && p < hi) in_block.push_back(p);
        candidates.swap(in_block);
    }

    const int take = std::min<int>(schedule.tokens_per_step, static_cast<int>(candidates.size()));
    switch (schedule.mode) {
    case UnmaskMode::fixed_order:
        return std::vector<int>(candidates.begin(), candidates.begin() + take);
    case UnmaskMode::seeded_random: {
        // partial Fisher-Yates over the candidate list
        std::vector<int> pool = candidates;
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(take));
        for (int i = 0; i < take; ++i) {
            std::uniform_int_distribution<int> pick(i, static_cast<int>(pool.size()) - 1);
            const int j = pick(rng);
            std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
            out.push_back(pool[static_cast<std::size_t>(i)]);
        }
        std::sort(out.begin(), out.end());
        return out;
    }
    case UnmaskMode::confidence: {
        if (logits == nullptr)
            throw std::invalid_argument("select_unmask_positions: confidence mode needs logits");
        std::vector<std::pair<double, int>> scored;
        scored.reserve(candidates.size());
        for (int p : candidates) {
            double best = logits->at(p, 0);
            for (Token v = 1; v < logits->vocab; ++v) best = std::max(best, logits->at(p, v));
            scored.emplace_back(best, p);
        }
        std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second; // ties -> lowest index
        });
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(take));
        for (int i = 0; i < take; ++i) out.push_back(scored[static_cast<std::size_t>(i)].second);
        std::sort(out.begin(), out.end());
        return out;
    }
    }
    throw std::logic_error("select_unmask_positions: unknown mode");
}

ReverseStepResult reverse_step(const MaskedSequence& x_next, std::span<const int> unmask_positions,
                               const LogitTable& logits, double temperature, Rng& rng) {
    if (temperature <= 0.0) throw std::invalid_argument("reverse_step: temperature must be > 0");
    ReverseStepResult out;
    out.x_t = x_next;
    for (int pos : unmask_positions) {
        if (!x_next.is_masked(pos))
            throw std::invalid_argument("reverse_step: unmask set contains an unmasked position");
        const std::vector<double> log_probs = logits.row_log_probs(pos, temperature);
        const double u = uniform01(rng);
        double cum = 0.0;
        Token tok = logits.vocab - 1;
        for (Token v = 0; v < logits.vocab; ++v) {
            cum += std::exp(log_probs[static_cast<std::size_t>(v)]);
            if (u < cum) {
                tok = v;
                break;
            }
        }
        out.x_t.tokens[static_cast<std::size_t>(pos)] = tok;
        out.log_prob += log_probs[static_cast<std::size_t>(tok)];
        double h = 0.0;
        for (double lp : log_probs) h -= std::exp(lp) * lp;
        out.entropy += h;
    }
    return out;
}

MaskedSequence initial_state(const std::vector<Token>& prompt, int response_len, int vocab_size) {
    const Token mask = static_cast<Token>(vocab_size);
    std::vector<Token> toks = prompt;
    toks.insert(toks.end(), static_cast<std::size_t>(response_len), mask);
    return MaskedSequence(std::move(toks), mask);
}

Trajectory rollout(const DenoiserModel& model, const std::vector<Token>& prompt, int response_len,
                   int total_steps, const UnmaskSchedule& unmask, Rng& rng, const RolloutOptions& opts) {
    if (response_len < 1) throw std::invalid_argument("rollout: response_len must be >= 1");
    const int needed = (response_len + unmask.tokens_per_step - 1) / unmask.tokens_per_step;
    if (needed > total_steps)
        throw std::invalid_argument("rollout: T * tokens_per_step cannot cover the response region");
    const int expected_len = static_cast<int>(prompt.size()) + response_len;
    if (expected_len != model.arch().seq_len)
        throw std::invalid_argument("rollout: prompt + response length does not match arch");

    const int response_begin = static_cast<int>(prompt.size());
    Trajectory traj;
    traj.query = prompt;
    traj.states.reserve(static_cast<std::size_t>(total_steps) + 1);
    traj.steps.reserve(static_cast<std::size_t>(total_steps));
    traj.states.push_back(initial_state(prompt, response_len, model.arch().vocab_size));

    Rng sched_rng = make_rng(unmask.seed);
    for (int t = total_steps - 1; t >= 0; --t) {
        const MaskedSequence& x_next = traj.states.back();
        TrajectoryStep step;
        step.t = t;
        if (x_next.mask_count() == 0) {
            traj.states.push_back(x_next);
            traj.steps.push_back(std::move(step));
            continue;
        }
        if (opts.forward_passes) ++*opts.forward_passes;
        const LogitTable logits = model.forward(x_next);
        step.unmask_positions = select_unmask_positions(x_next, &logits, unmask, sched_rng, response_begin);

        MaskedSequence x_t = x_next;
        step.chosen.reserve(step.unmask_positions.size());
        for (int pos : step.unmask_positions) {
            const std::vector<double> log_probs = logits.row_log_probs(pos, opts.temperature);
            Token tok;
            if (opts.greedy) {
                tok = logits.row_argmax(pos);
            } else {
                const double u = uniform01(rng);
                double cum = 0.0;
                tok = logits.vocab - 1;
                for (Token v = 0; v < logits.vocab; ++v) {
                    cum += std::exp(log_probs[static_cast<std::size_t>(v)]);
                    if (u < cum) {
                        tok = v;
                        break;
                    }
                }
            }
            x_t.tokens[static_cast<std::size_t>(pos)] = tok;
            step.chosen.push_back(tok);
            step.log_prob += log_probs[static_cast<std::size_t>(tok)];
            if (opts.record_entropies) {
                double h = 0.0;
                for (double lp : log_probs) h -= std::exp(lp) * lp;
                step.entropy += h;
            }
        }

        // one-shot greedy completion of x_{t+1}, free from this step's logits
        step.greedy_completion = x_next.tokens;
        for (int l = 0; l < x_next.length(); ++l)
            if (x_next.is_masked(l)) step.greedy_completion[static_cast<std::size_t>(l)] = logits.row_argmax(l);

        traj.states.push_back(std::move(x_t));
        traj.steps.push_back(std::move(step));
    }

    if (!traj.states.back().is_clean())
        throw std::logic_error("rollout: response still masked after T steps");
    return traj;
}

std::vector<std::vector<int>> plan_unmask_sequence(const MaskedSequence& start, const UnmaskSchedule& schedule,
                                                   int response_begin) {
    if (!schedule.theta_independent())
        throw std::invalid_argument("plan_unmask_sequence: confidence mode depends on model outputs");
    std::vector<std::vector<int>> plan;
    MaskedSequence state = start;
    Rng sched_rng = make_rng(schedule.seed);
    while (state.mask_count() > 0) {
        std::vector<int> u = select_unmask_positions(state, nullptr, schedule, sched_rng, response_begin);
        for (int pos : u) state.tokens[static_cast<std::size_t>(pos)] = 0; // any content token clears the mask
        plan.push_back(std::move(u));
    }
    return plan;
}

} // namespace egspo

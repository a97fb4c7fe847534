#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "egspo/diffusion.hpp"

using namespace egspo;

namespace {

DenoiserModel small_model(int seq_len, int vocab, std::uint64_t seed = 1, double scale = 0.3) {
    ModelArch a;
    a.embed_dim = 4;
    a.hidden_dim = 6;
    a.seq_len = seq_len;
    a.vocab_size = vocab;
    return DenoiserModel(a, seed, scale);
}

} // namespace

TEST_CASE("forward_mask boundary steps") {
    const NoiseSchedule schedule(4);
    const MaskedSequence x0({0, 1, 2, 1, 0, 2}, 3);
    Rng rng = make_rng(1);
    CHECK(forward_mask(x0, 0, schedule, rng) == x0); // alpha = 1 keeps everything
    const MaskedSequence full = forward_mask(x0, 4, schedule, rng);
    CHECK(full.mask_count() == 6); // alpha = 0 masks everything
}

TEST_CASE("forward_mask empirical fraction at alpha = 0.5") {
    const NoiseSchedule schedule(4);
    const MaskedSequence x0({0, 1, 0, 1, 0, 1, 0, 1}, 2);
    Rng rng = make_rng(77);
    std::int64_t masked = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) masked += forward_mask(x0, 2, schedule, rng).mask_count();
    const double fraction = static_cast<double>(masked) / (8.0 * n);
    CHECK(fraction > 0.49);
    CHECK(fraction < 0.51);
}

TEST_CASE("forward_mask error paths") {
    const NoiseSchedule schedule(4);
    Rng rng = make_rng(1);
    const MaskedSequence clean({0, 1}, 2);
    CHECK_THROWS_AS(forward_mask(clean, -1, schedule, rng), std::out_of_range);
    CHECK_THROWS_AS(forward_mask(clean, 5, schedule, rng), std::out_of_range);
    const MaskedSequence dirty({0, 2}, 2);
    CHECK_THROWS_AS(forward_mask(dirty, 1, schedule, rng), std::invalid_argument);
}

TEST_CASE("forward_mask expected mask count grows with t") {
    const NoiseSchedule schedule(8);
    const MaskedSequence x0({0, 1, 0, 1, 0, 1}, 2);
    Rng rng = make_rng(5);
    double prev = -1.0;
    for (int t : {1, 3, 5, 7}) {
        std::int64_t masked = 0;
        for (int i = 0; i < 10000; ++i) masked += forward_mask(x0, t, schedule, rng).mask_count();
        const double mean = static_cast<double>(masked) / 10000.0;
        CHECK(mean >= prev);
        prev = mean;
    }
}

TEST_CASE("select_unmask_positions: fixed order picks lowest indices") {
    MaskedSequence x({0, 1, 2, 0, 1, 2}, 3);
    x.tokens[2] = x.mask;
    x.tokens[5] = x.mask;
    Rng rng = make_rng(1);
    const UnmaskSchedule sched{UnmaskMode::fixed_order, 1, 0, 0};
    CHECK(select_unmask_positions(x, nullptr, sched, rng) == std::vector<int>{2});
}

TEST_CASE("select_unmask_positions: confidence picks the highest max-logit position") {
    MaskedSequence x = MaskedSequence::all_mask(2, 2);
    LogitTable logits;
    logits.positions = 2;
    logits.vocab = 2;
    logits.values = {0.3, 0.1, 2.1, -1.0}; // max-logit: 0.3 at pos 0, 2.1 at pos 1
    Rng rng = make_rng(1);
    const UnmaskSchedule sched{UnmaskMode::confidence, 1, 0, 0};
    CHECK(select_unmask_positions(x, &logits, sched, rng) == std::vector<int>{1});
}

TEST_CASE("select_unmask_positions clamps to the remaining masks") {
    MaskedSequence x({0, 1, 2, 0, 1, 2}, 3);
    x.tokens[0] = x.mask;
    x.tokens[3] = x.mask;
    x.tokens[4] = x.mask;
    Rng rng = make_rng(1);
    const UnmaskSchedule sched{UnmaskMode::fixed_order, 4, 0, 0};
    CHECK(select_unmask_positions(x, nullptr, sched, rng) == std::vector<int>{0, 3, 4});
}

TEST_CASE("select_unmask_positions with an empty mask set is an error") {
    const MaskedSequence x({0, 1}, 2);
    Rng rng = make_rng(1);
    const UnmaskSchedule sched{UnmaskMode::fixed_order, 1, 0, 0};
    CHECK_THROWS_AS(select_unmask_positions(x, nullptr, sched, rng), std::invalid_argument);
}

TEST_CASE("block restriction stays in the lowest unfinished block") {
    // response begins at 2, block size 2: blocks {2,3}, {4,5}
    MaskedSequence x({0, 1, 1, 2, 2, 2}, 3);
    x.tokens[3] = x.mask;
    x.tokens[4] = x.mask;
    x.tokens[5] = x.mask;
    Rng rng = make_rng(1);
    const UnmaskSchedule sched{UnmaskMode::fixed_order, 4, 2, 0};
    CHECK(select_unmask_positions(x, nullptr, sched, rng, 2) == std::vector<int>{3});
    x.tokens[3] = 0;
    CHECK(select_unmask_positions(x, nullptr, sched, rng, 2) == std::vector<int>{4, 5});
}

TEST_CASE("reverse_step with an empty unmask set is the identity") {
    DenoiserModel m = small_model(4, 3);
    MaskedSequence x = MaskedSequence::all_mask(4, 3);
    const LogitTable logits = m.forward(x);
    Rng rng = make_rng(1);
    const ReverseStepResult r = reverse_step(x, {}, logits, 1.0, rng);
    CHECK(r.x_t == x);
    CHECK(r.log_prob == 0.0);
    CHECK(r.entropy == 0.0);
}

TEST_CASE("reverse_step: uniform two-token logits give entropy ln 2") {
    MaskedSequence x = MaskedSequence::all_mask(1, 2);
    LogitTable logits;
    logits.positions = 1;
    logits.vocab = 2;
    logits.values = {0.7, 0.7};
    Rng rng = make_rng(1);
    int count0 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        std::vector<int> u{0};
        const ReverseStepResult r = reverse_step(x, u, logits, 1.0, rng);
        CHECK(r.entropy == doctest::Approx(std::log(2.0)).epsilon(1e-12));
        count0 += (r.x_t.tokens[0] == 0) ? 1 : 0;
    }
    CHECK(std::abs(count0 / static_cast<double>(n) - 0.5) < 0.02);
}

TEST_CASE("reverse_step log-prob and entropy at probs (0.9, 0.1)") {
    MaskedSequence x = MaskedSequence::all_mask(1, 2);
    LogitTable logits;
    logits.positions = 1;
    logits.vocab = 2;
    logits.values = {std::log(0.9), std::log(0.1)};
    Rng rng = make_rng(4); // first draw selects token 0 (p = 0.9)
    std::vector<int> u{0};
    const ReverseStepResult r = reverse_step(x, u, logits, 1.0, rng);
    REQUIRE(r.x_t.tokens[0] == 0);
    CHECK(r.log_prob == doctest::Approx(std::log(0.9)).epsilon(1e-12));
    const double expected_entropy = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
    CHECK(r.entropy == doctest::Approx(expected_entropy).epsilon(1e-12));
}

TEST_CASE("reverse_step error paths") {
    MaskedSequence x({0, 2}, 2);
    x.tokens[1] = x.mask;
    LogitTable logits;
    logits.positions = 2;
    logits.vocab = 2;
    logits.values = {0, 0, 0, 0};
    Rng rng = make_rng(1);
    std::vector<int> bad{0}; // position 0 is not masked
    CHECK_THROWS_AS(reverse_step(x, bad, logits, 1.0, rng), std::invalid_argument);
    std::vector<int> ok{1};
    CHECK_THROWS_AS(reverse_step(x, ok, logits, 0.0, rng), std::invalid_argument);
    CHECK_THROWS_AS(reverse_step(x, ok, logits, -1.0, rng), std::invalid_argument);
}

TEST_CASE("rollout: one-shot unmasking cleans everything in a single step") {
    DenoiserModel m = small_model(4, 3);
    Rng rng = make_rng(9);
    const UnmaskSchedule sched{UnmaskMode::fixed_order, 4, 0, 0};
    const Trajectory traj = rollout(m, {}, 4, 1, sched, rng);
    CHECK(traj.total_steps() == 1);
    CHECK(traj.nonempty_step_count() == 1);
    CHECK(traj.final_state().is_clean());
}

TEST_CASE("rollout: unmask sets partition the response region") {
    DenoiserModel m = small_model(4, 3);
    Rng rng = make_rng(10);
    const UnmaskSchedule sched{UnmaskMode::seeded_random, 1, 0, 123};
    const Trajectory traj = rollout(m, {}, 4, 4, sched, rng);
    CHECK(traj.nonempty_step_count() == 4);
    std::set<int> seen;
    std::size_t total = 0;
    for (const TrajectoryStep& s : traj.steps) {
        for (int p : s.unmask_positions) seen.insert(p);
        total += s.unmask_positions.size();
    }
    CHECK(seen == std::set<int>{0, 1, 2, 3});
    CHECK(total == 4); // pairwise disjoint
}

TEST_CASE("rollout under a near-deterministic model is seed independent") {
    DenoiserModel m = small_model(5, 3, 2);
    // crank one output row so every position strongly prefers token 2
    const ModelArch& a = m.arch();
    for (int k = 0; k < a.hidden_dim; ++k)
        m.params_mut()[static_cast<std::size_t>(a.w_out_offset() + 2 * a.hidden_dim + k)] += 50.0;
    const UnmaskSchedule sched{UnmaskMode::fixed_order, 2, 0, 0};
    Rng rng1 = make_rng(111), rng2 = make_rng(999);
    const Trajectory t1 = rollout(m, {1}, 4, 2, sched, rng1);
    const Trajectory t2 = rollout(m, {1}, 4, 2, sched, rng2);
    CHECK(t1.final_state() == t2.final_state());
}

TEST_CASE("rollout records states that differ exactly on the unmask sets") {
    DenoiserModel m = small_model(6, 2, 3);
    Rng rng = make_rng(21);
    const UnmaskSchedule sched{UnmaskMode::seeded_random, 2, 0, 9};
    const Trajectory traj = rollout(m, {0, 1}, 4, 3, sched, rng);
    REQUIRE(traj.states.size() == traj.steps.size() + 1);
    int prev_masks = traj.states.front().mask_count();
    for (std::size_t k = 0; k < traj.steps.size(); ++k) {
        const MaskedSequence& before = traj.states[k];
        const MaskedSequence& after = traj.states[k + 1];
        for (int l = 0; l < before.length(); ++l) {
            const bool in_u = std::find(traj.steps[k].unmask_positions.begin(),
                                        traj.steps[k].unmask_positions.end(), l) !=
                              traj.steps[k].unmask_positions.end();
            if (in_u) {
                CHECK(before.is_masked(l));
                CHECK(!after.is_masked(l));
            } else {
                CHECK(before.tokens[static_cast<std::size_t>(l)] == after.tokens[static_cast<std::size_t>(l)]);
            }
        }
        const int masks = after.mask_count();
        if (!traj.steps[k].unmask_positions.empty()) CHECK(masks < prev_masks);
        CHECK(masks <= prev_masks);
        prev_masks = masks;
    }
}

TEST_CASE("rollout log-probs match an independent recomputation") {
    // exp(sum log p) must equal the product of per-position softmax probs
    DenoiserModel m = small_model(5, 3, 4);
    Rng rng = make_rng(31);
    const UnmaskSchedule sched{UnmaskMode::fixed_order, 2, 0, 0};
    const Trajectory traj = rollout(m, {2}, 4, 2, sched, rng, RolloutOptions{0.8, false, true, nullptr});
    double log_sum = 0.0;
    double prob_product = 1.0;
    for (std::size_t k = 0; k < traj.steps.size(); ++k) {
        log_sum += traj.steps[k].log_prob;
        const LogitTable logits = m.forward(traj.states[k]);
        for (std::size_t i = 0; i < traj.steps[k].unmask_positions.size(); ++i) {
            const int pos = traj.steps[k].unmask_positions[i];
            prob_product *=
                logits.row_probs(pos, 0.8)[static_cast<std::size_t>(traj.steps[k].chosen[i])];
        }
    }
    CHECK(std::abs(std::exp(log_sum) - prob_product) / prob_product < 1e-12);
}

TEST_CASE("rollout with excess steps records empty trailing unmask sets") {
    DenoiserModel m = small_model(4, 3);
    Rng rng = make_rng(2);
    const UnmaskSchedule sched{UnmaskMode::fixed_order, 4, 0, 0};
    const Trajectory traj = rollout(m, {}, 4, 3, sched, rng);
    CHECK(traj.total_steps() == 3);
    CHECK(traj.nonempty_step_count() == 1);
    CHECK(traj.steps[0].unmask_positions.size() == 4);
    CHECK(traj.steps[1].unmask_positions.empty());
    CHECK(traj.steps[2].unmask_positions.empty());
    CHECK(traj.final_state().is_clean());
}

TEST_CASE("rollout rejects a step budget that cannot cover the response") {
    DenoiserModel m = small_model(4, 3);
    Rng rng = make_rng(2);
    const UnmaskSchedule sched{UnmaskMode::fixed_order, 1, 0, 0};
    CHECK_THROWS_AS(rollout(m, {}, 4, 3, sched, rng), std::invalid_argument);
}

TEST_CASE("rollouts are pure given model and seed") {
    DenoiserModel m = small_model(6, 3, 7);
    const UnmaskSchedule sched{UnmaskMode::seeded_random, 1, 0, 55};
    Rng r1 = make_rng(42), r2 = make_rng(42);
    const Trajectory a = rollout(m, {0, 2}, 4, 4, sched, r1);
    const Trajectory b = rollout(m, {0, 2}, 4, 4, sched, r2);
    REQUIRE(a.states.size() == b.states.size());
    for (std::size_t i = 0; i < a.states.size(); ++i) CHECK(a.states[i] == b.states[i]);
    for (std::size_t k = 0; k < a.steps.size(); ++k) {
        CHECK(a.steps[k].log_prob == b.steps[k].log_prob);
        CHECK(a.steps[k].entropy == b.steps[k].entropy);
    }
}

TEST_CASE("plan_unmask_sequence matches the rollout unmask sets") {
    DenoiserModel m = small_model(6, 2, 8);
    const UnmaskSchedule sched{UnmaskMode::seeded_random, 2, 0, 1234};
    Rng rng = make_rng(3);
    const Trajectory traj = rollout(m, {1, 0}, 4, 2, sched, rng);
    const auto plan = plan_unmask_sequence(initial_state({1, 0}, 4, 2), sched, 2);
    REQUIRE(plan.size() == 2);
    for (std::size_t k = 0; k < plan.size(); ++k) CHECK(plan[k] == traj.steps[k].unmask_positions);

    const UnmaskSchedule conf{UnmaskMode::confidence, 1, 0, 0};
    CHECK_THROWS_AS(plan_unmask_sequence(initial_state({1, 0}, 4, 2), conf, 2), std::invalid_argument);
}

TEST_CASE("entropy recording costs no extra forward passes") {
    DenoiserModel m = small_model(5, 3, 6);
    const UnmaskSchedule sched{UnmaskMode::fixed_order, 1, 0, 0};
    std::uint64_t with_entropy = 0, without_entropy = 0;
    Rng r1 = make_rng(11), r2 = make_rng(11);
    rollout(m, {0}, 4, 4, sched, r1, RolloutOptions{1.0, false, true, &with_entropy});
    rollout(m, {0}, 4, 4, sched, r2, RolloutOptions{1.0, false, false, &without_entropy});
    CHECK(with_entropy == without_entropy);
    CHECK(with_entropy == 4); // one per nonempty step
}

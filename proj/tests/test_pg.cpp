#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "egspo/pg.hpp"

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

// model whose logits are the same fixed row at every position
DenoiserModel fixed_logit_model(int seq_len, const std::vector<double>& logit_row) {
    const int vocab = static_cast<int>(logit_row.size());
    DenoiserModel m = small_model(seq_len, vocab, 0, 0.0);
    for (double& p : m.params_mut()) p = 0.0;
    const ModelArch& a = m.arch();
    // h2 = (tanh(b2_0), 0, ...) via the hidden bias; w_out column 0 carries the row
    m.params_mut()[static_cast<std::size_t>(a.b2_offset())] = 1.0;
    const double h = std::tanh(1.0);
    for (int v = 0; v < vocab; ++v)
        m.params_mut()[static_cast<std::size_t>(a.w_out_offset() + v * a.hidden_dim)] = logit_row[v] / h;
    return m;
}

RewardFn hash_reward(std::uint64_t seed, int query_len) {
    return [seed, query_len](const MaskedSequence& x0, const TaskQuery&) {
        std::uint64_t h = seed;
        for (int i = query_len; i < x0.length(); ++i)
            h = splitmix64(h ^ static_cast<std::uint64_t>(x0.tokens[static_cast<std::size_t>(i)] + 1));
        return static_cast<double>(h >> 11) * 0x1.0p-53;
    };
}

double norm(const GradVec& v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    return std::sqrt(sq);
}

double rel_err(const GradVec& a, const GradVec& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += std::max(a[i] * a[i], b[i] * b[i]);
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

const UnmaskSchedule kFixed1{UnmaskMode::fixed_order, 1, 0, 0};

} // namespace

TEST_CASE("enumerate_completions: probabilities sum to one, lexicographic order") {
    DenoiserModel m = small_model(4, 2, 3);
    const MaskedSequence start = initial_state({1}, 3, 2);
    const EnumeratedDistribution dist = enumerate_completions(m, start, kFixed1, 1.0);
    REQUIRE(dist.outcomes.size() == 8);
    CHECK(std::abs(dist.total_prob - 1.0) < 1e-10);
    // lexicographic by (step, position, token): final tokens count upward in binary
    for (std::size_t i = 0; i < 8; ++i) {
        const MaskedSequence& x0 = dist.outcomes[i].states.back();
        const std::size_t code = static_cast<std::size_t>(x0.tokens[1]) * 4 +
                                 static_cast<std::size_t>(x0.tokens[2]) * 2 +
                                 static_cast<std::size_t>(x0.tokens[3]);
        CHECK(code == i);
    }
}

TEST_CASE("exact_value of a clean state is the reward itself") {
    DenoiserModel m = small_model(3, 2, 5);
    const TaskQuery q{{0}, {}};
    const MaskedSequence clean({0, 1, 1}, 2);
    const RewardFn r = hash_reward(42, 1);
    CHECK(exact_value(m, clean, q, r, kFixed1, 1.0) == r(clean, q));
}

TEST_CASE("exact_value under a uniform policy counts indicator mass") {
    // zero parameters -> uniform; indicator of one target completion
    DenoiserModel m = small_model(4, 3, 0, 0.0);
    for (double& p : m.params_mut()) p = 0.0;
    const TaskQuery q{{2}, {}};
    const RewardFn indicator = [](const MaskedSequence& x0, const TaskQuery&) {
        return (x0.tokens[1] == 1 && x0.tokens[2] == 0 && x0.tokens[3] == 2) ? 1.0 : 0.0;
    };
    const MaskedSequence start = initial_state({2}, 3, 3); // 3 masks
    CHECK(exact_value(m, start, q, indicator, kFixed1, 1.0) ==
          doctest::Approx(1.0 / 27.0).epsilon(1e-12));
}

TEST_CASE("exact_value matches Monte-Carlo rollouts within 3 standard errors") {
    DenoiserModel m = small_model(4, 2, 9);
    const TaskQuery q{{1}, {}};
    const RewardFn r = hash_reward(7, 1);
    const MaskedSequence start = initial_state({1}, 3, 2);
    const double exact = exact_value(m, start, q, r, kFixed1, 1.0);

    Rng rng = make_rng(123);
    const int n = 100000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const Trajectory traj = rollout(m, {1}, 3, 3, kFixed1, rng);
        const double ri = r(traj.final_state(), q);
        sum += ri;
        sumsq += ri * ri;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sumsq / n - mean * mean) / n);
    CHECK(std::abs(mean - exact) < 3.0 * se + 1e-12);
}

TEST_CASE("exact_value cap produces the instance-too-large error") {
    DenoiserModel m = small_model(8, 3, 2);
    const TaskQuery q{{0}, {}};
    const MaskedSequence start = initial_state({0}, 7, 3);
    EnumLimits limits;
    limits.max_outcomes = 100; // 3^7 = 2187 > 100
    CHECK_THROWS_AS(exact_value(m, start, q, hash_reward(1, 1), kFixed1, 1.0, limits),
                    EnumerationCapExceeded);
}

TEST_CASE("exact_gradient vanishes for rewards that ignore the completion") {
    DenoiserModel m = small_model(4, 2, 11);
    const TaskQuery q{{0}, {}};
    SUBCASE("constant reward") {
        const RewardFn constant = [](const MaskedSequence&, const TaskQuery&) { return 0.8; };
        const GradVec g = exact_gradient(m, q, 3, constant, kFixed1, 1.0);
        for (double v : g) CHECK(std::abs(v) < 1e-13);
    }
    SUBCASE("query-only reward") {
        const RewardFn query_only = [](const MaskedSequence&, const TaskQuery& qq) {
            return qq.prompt[0] == 0 ? 0.3 : 0.9;
        };
        const GradVec g = exact_gradient(m, q, 3, query_only, kFixed1, 1.0);
        for (double v : g) CHECK(std::abs(v) < 1e-13);
    }
}

TEST_CASE("theorem-1 identity: both enumerated forms match finite differences") {
    for (std::uint64_t seed : {21ULL, 22ULL, 23ULL}) {
        DenoiserModel m = small_model(4, 2, seed);
        const TaskQuery q{{1}, {}};
        const RewardFn r = hash_reward(seed, 1);
        const UnmaskSchedule us =
            (seed % 2 == 0) ? kFixed1 : UnmaskSchedule{UnmaskMode::seeded_random, 1, 0, seed};

        const GradVec reward_form = exact_gradient(m, q, 3, r, us, 1.0);
        const GradVec adv_form = exact_gradient_advantage(m, q, 3, r, us, 1.0);
        CHECK(rel_err(reward_form, adv_form) < 1e-6);

        GradVec fd(reward_form.size(), 0.0);
        DenoiserModel probe = m;
        const double h = 1e-5;
        for (std::size_t p = 0; p < fd.size(); ++p) {
            const double orig = probe.params_mut()[p];
            probe.params_mut()[p] = orig + h;
            const double plus = exact_objective(probe, q, 3, r, us, 1.0);
            probe.params_mut()[p] = orig - h;
            const double minus = exact_objective(probe, q, 3, r, us, 1.0);
            probe.params_mut()[p] = orig;
            fd[p] = (plus - minus) / (2.0 * h);
        }
        CHECK(rel_err(reward_form, fd) < 1e-6);
    }
}

TEST_CASE("baseline invariance: arbitrary state baselines leave the gradient unchanged") {
    DenoiserModel m = small_model(4, 2, 31);
    const TaskQuery q{{0}, {}};
    const RewardFn r = hash_reward(5, 1);
    const GradVec reference = exact_gradient(m, q, 3, r, kFixed1, 1.0);
    const BaselineFn weird = [](const MaskedSequence& s) {
        return 0.7 * static_cast<double>(s.mask_count()) - 0.2;
    };
    const GradVec alt = exact_gradient_advantage(m, q, 3, r, kFixed1, 1.0, weird);
    for (std::size_t i = 0; i < alt.size(); ++i) CHECK(std::abs(alt[i] - reference[i]) < 1e-10);
}

TEST_CASE("per-step gradients sum to the full gradient") {
    DenoiserModel m = small_model(4, 2, 33);
    const TaskQuery q{{1}, {}};
    const RewardFn r = hash_reward(9, 1);
    const GradVec full = exact_gradient(m, q, 3, r, kFixed1, 1.0);
    const std::vector<GradVec> steps = exact_step_gradients(m, q, 3, r, kFixed1, 1.0);
    REQUIRE(steps.size() == 3);
    GradVec sum(full.size(), 0.0);
    for (const GradVec& g : steps)
        for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
    CHECK(rel_err(sum, full) < 1e-12);
}

TEST_CASE("mc_gradient_reinforce is near zero for a saturated policy") {
    const DenoiserModel m = fixed_logit_model(4, {30.0, 0.0}); // token 0 with p = 1 - 1e-13
    const TaskQuery q{{0}, {}};
    McOptions opt;
    opt.n_samples = 200;
    opt.seed = 5;
    opt.total_steps = 3;
    const McGradientStats stats = mc_gradient_reinforce(m, q, 3, hash_reward(3, 1), kFixed1, opt);
    CHECK(norm(stats.mean) < 1e-3);
}

TEST_CASE("mc_gradient_reinforce lands near the enumerated gradient") {
    DenoiserModel m = small_model(4, 2, 17);
    const TaskQuery q{{0}, {}};
    const RewardFn r = hash_reward(11, 1);
    const GradVec exact = exact_gradient(m, q, 3, r, kFixed1, 1.0);
    McOptions opt;
    opt.n_samples = 20000;
    opt.seed = 7;
    opt.total_steps = 3;
    const McGradientStats stats = mc_gradient_reinforce(m, q, 3, r, kFixed1, opt);
    const std::vector<double> se = stats.standard_errors();
    for (std::size_t i = 0; i < exact.size(); ++i)
        CHECK(std::abs(stats.mean[i] - exact[i]) <= 4.0 * std::max(se[i], 1e-12));
}

TEST_CASE("mc_gradient_reinforce with constant reward is zero-mean") {
    DenoiserModel m = small_model(4, 2, 19);
    const TaskQuery q{{0}, {}};
    const RewardFn constant = [](const MaskedSequence&, const TaskQuery&) { return 0.5; };
    // 100 independent small batches; the grand mean should sit within noise
    GradVec grand(static_cast<std::size_t>(m.arch().param_count()), 0.0);
    GradVec grand_sq(grand.size(), 0.0);
    const int reps = 100;
    for (int rep = 0; rep < reps; ++rep) {
        McOptions opt;
        opt.n_samples = 20;
        opt.seed = 1000 + static_cast<std::uint64_t>(rep);
        opt.total_steps = 3;
        const McGradientStats stats = mc_gradient_reinforce(m, q, 3, constant, kFixed1, opt);
        for (std::size_t i = 0; i < grand.size(); ++i) {
            grand[i] += stats.mean[i];
            grand_sq[i] += stats.mean[i] * stats.mean[i];
        }
    }
    double norm_mean = 0.0, norm_se = 0.0;
    for (std::size_t i = 0; i < grand.size(); ++i) {
        const double mean = grand[i] / reps;
        const double var = (grand_sq[i] / reps - mean * mean) / reps;
        norm_mean += mean * mean;
        norm_se += std::max(var, 0.0);
    }
    CHECK(std::sqrt(norm_mean) < 4.0 * std::sqrt(norm_se) + 1e-12);
}

TEST_CASE("mc_gradient_stepwise with zero baseline reproduces reinforce bitwise") {
    DenoiserModel m = small_model(4, 3, 23);
    const TaskQuery q{{2}, {}};
    const RewardFn r = hash_reward(13, 1);
    McOptions opt;
    opt.n_samples = 500;
    opt.seed = 99;
    opt.total_steps = 3;
    const McGradientStats a = mc_gradient_reinforce(m, q, 3, r, kFixed1, opt);
    opt.baseline = BaselineMode::zero;
    const McGradientStats b = mc_gradient_stepwise(m, q, 3, r, kFixed1, opt);
    CHECK(a.mean == b.mean);
    CHECK(a.sample_variance == b.sample_variance);
}

TEST_CASE("mc_gradient_stepwise with exact values: unbiased and lower variance") {
    DenoiserModel m = small_model(4, 2, 29);
    const TaskQuery q{{1}, {}};
    const RewardFn r = hash_reward(17, 1);
    const GradVec exact = exact_gradient(m, q, 3, r, kFixed1, 1.0);

    McOptions opt;
    opt.n_samples = 20000;
    opt.seed = 31;
    opt.total_steps = 3;
    const McGradientStats reinforce = mc_gradient_reinforce(m, q, 3, r, kFixed1, opt);
    opt.baseline = BaselineMode::exact_value;
    const McGradientStats stepwise = mc_gradient_stepwise(m, q, 3, r, kFixed1, opt);

    const std::vector<double> se = stepwise.standard_errors();
    for (std::size_t i = 0; i < exact.size(); ++i)
        CHECK(std::abs(stepwise.mean[i] - exact[i]) <= 4.0 * std::max(se[i], 1e-12));

    std::size_t lower = 0;
    for (std::size_t i = 0; i < exact.size(); ++i)
        if (stepwise.sample_variance[i] <= reinforce.sample_variance[i]) ++lower;
    CHECK(static_cast<double>(lower) / static_cast<double>(exact.size()) >= 0.8);
}

TEST_CASE("stepwise advantages stay within 1 for rewards in [0, 1]") {
    DenoiserModel m = small_model(4, 2, 37);
    const TaskQuery q{{0}, {}};
    const RewardFn r = hash_reward(19, 1);
    ValueOracle oracle(m, q, r, kFixed1, 1.0);
    Rng rng = make_rng(3);
    for (int i = 0; i < 50; ++i) {
        const Trajectory traj = rollout(m, {0}, 3, 3, kFixed1, rng);
        const double reward = r(traj.final_state(), q);
        for (std::size_t k = 0; k < traj.steps.size(); ++k) {
            const double a = reward - oracle.value(traj.states[k]);
            CHECK(std::abs(a) <= 1.0);
        }
    }
}

TEST_CASE("one_step_value on a clean state returns the reward in both modes") {
    DenoiserModel m = small_model(3, 2, 41);
    const TaskQuery q{{1}, {}};
    const MaskedSequence clean({1, 0, 1}, 2);
    const RewardFn r = hash_reward(23, 1);
    CHECK(one_step_value(m, clean, q, r, OneStepMode::enumerate) == r(clean, q));
    CHECK(one_step_value(m, clean, q, r, OneStepMode::greedy) == r(clean, q));
}

TEST_CASE("one_step_value equals exact_value when one step finishes the response") {
    DenoiserModel m = small_model(4, 2, 43);
    const TaskQuery q{{0}, {}};
    const RewardFn r = hash_reward(29, 1);
    // two masks left, scheduler unmasks both in one step
    MaskedSequence x = initial_state({0}, 3, 2);
    x.tokens[1] = 1;
    const UnmaskSchedule both{UnmaskMode::fixed_order, 2, 0, 0};
    const double v_exact = exact_value(m, x, q, r, both, 1.0);
    const double v_one = one_step_value(m, x, q, r, OneStepMode::enumerate, 1.0);
    CHECK(v_one == doctest::Approx(v_exact).epsilon(1e-12));
}

TEST_CASE("one_step_value enumerate matches the four-term weighted sum by hand") {
    DenoiserModel m = small_model(4, 2, 47);
    const TaskQuery q{{1}, {}};
    MaskedSequence x = initial_state({1}, 3, 2);
    x.tokens[2] = 0; // masks at positions 1 and 3
    const RewardFn r = hash_reward(31, 1);

    const LogitTable logits = m.forward(x);
    const std::vector<double> p1 = logits.row_probs(1, 1.0);
    const std::vector<double> p3 = logits.row_probs(3, 1.0);
    double expected = 0.0;
    for (Token a = 0; a < 2; ++a) {
        for (Token b = 0; b < 2; ++b) {
            MaskedSequence x0 = x;
            x0.tokens[1] = a;
            x0.tokens[3] = b;
            expected += p1[static_cast<std::size_t>(a)] * p3[static_cast<std::size_t>(b)] * r(x0, q);
        }
    }
    CHECK(one_step_value(m, x, q, r, OneStepMode::enumerate, 1.0) ==
          doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("one_step_value bias at early steps is reported, not asserted") {
    DenoiserModel m = small_model(4, 2, 53);
    const TaskQuery q{{0}, {}};
    const RewardFn r = hash_reward(37, 1);
    const MaskedSequence start = initial_state({0}, 3, 2); // t = 3 steps remaining
    const double exact = exact_value(m, start, q, r, kFixed1, 1.0);
    const double approx = one_step_value(m, start, q, r, OneStepMode::enumerate, 1.0);
    MESSAGE("one-step value bias at t=3: ", std::abs(approx - exact));
    CHECK(std::isfinite(approx));
}

TEST_CASE("greedy_complete") {
    SUBCASE("no masks: identity, no forward pass") {
        DenoiserModel m = small_model(3, 3, 3);
        const MaskedSequence clean({0, 1, 2}, 3);
        std::uint64_t passes = 0;
        CHECK(greedy_complete(m, clean, &passes) == clean);
        CHECK(passes == 0);
    }
    SUBCASE("argmax fill from logits (1.0, 3.0, 2.0)") {
        DenoiserModel m = fixed_logit_model(3, {1.0, 3.0, 2.0});
        MaskedSequence x({0, 2, 1}, 3);
        x.tokens[1] = x.mask;
        std::uint64_t passes = 0;
        const MaskedSequence done = greedy_complete(m, x, &passes);
        CHECK(done.tokens == std::vector<Token>{0, 1, 1});
        CHECK(passes == 1);
    }
    SUBCASE("exact ties pick the lowest token id, deterministically") {
        DenoiserModel m = fixed_logit_model(3, {2.0, 2.0, 1.0});
        MaskedSequence x = MaskedSequence::all_mask(3, 3);
        const MaskedSequence a = greedy_complete(m, x);
        const MaskedSequence b = greedy_complete(m, x);
        CHECK(a.tokens == std::vector<Token>{0, 0, 0});
        CHECK(a == b);
    }
}

TEST_CASE("stepwise_advantage") {
    CHECK(stepwise_advantage(0.7, 0.4, 0.0) == 0.7);          // lambda 0 recovers the raw reward
    CHECK(stepwise_advantage(1.0, 0.5, 1.0) == 1.5);          // (1+1)*1 - 1*0.5
    CHECK(stepwise_advantage(0.6, 0.6, 1.0) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK_THROWS_AS(stepwise_advantage(0.5, 0.5, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(stepwise_advantage(0.5, 0.5, 1.1), std::invalid_argument);
}

TEST_CASE("exact_* reject the confidence unmask mode") {
    DenoiserModel m = small_model(4, 2, 59);
    const TaskQuery q{{0}, {}};
    const UnmaskSchedule conf{UnmaskMode::confidence, 1, 0, 0};
    CHECK_THROWS_AS(exact_gradient(m, q, 3, hash_reward(1, 1), conf, 1.0), std::invalid_argument);
}

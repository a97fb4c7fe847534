#include "egspo/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace egspo {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}


double rel_error(const GradVec& a, const GradVec& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        num += d * d;
        den += std::max(a[i] * a[i], b[i] * b[i]);
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

/// Seeded reward table over clean sequences, bounded in [0, 1]: hashes the
/// response tokens and the instance seed into a uniform value.
RewardFn make_hash_reward(std::uint64_t seed, int query_len) {
    return [seed, query_len](const MaskedSequence& x0, const TaskQuery&) {
        std::uint64_t h = seed;
        for (int i = query_len; i < x0.length(); ++i)
            h = splitmix64(h ^ static_cast<std::uint64_t>(x0.tokens[static_cast<std::size_t>(i)] + 1));
        return static_cast<double>(h >> 11) * 0x1.0p-53;
    };
}

} // namespace

TinyInstance make_tiny_instance(std::uint64_t seed, int response_len, int vocab_size, int tokens_per_step,
                                UnmaskMode mode) {
    Rng rng = make_rng(splitmix64(seed));
    std::uniform_int_distribution<Token> tok(0, vocab_size - 1);

    const int query_len = 1;
    ModelArch arch;
    arch.embed_dim = 4;
    arch.hidden_dim = 6;
    arch.seq_len = query_len + response_len;
    arch.vocab_size = vocab_size;

    TinyInstance inst{
        DenoiserModel(arch, derive_seed(seed, 1), 0.3),
        TaskQuery{{tok(rng)}, {}},
        response_len,
        UnmaskSchedule{mode, tokens_per_step, 0, derive_seed(seed, 2)},
        1.0,
        make_hash_reward(derive_seed(seed, 3), query_len),
    };
    return inst;
}

VerificationSuiteResult verify_theorem1(int instances) {
    VerificationSuiteResult result;
    const auto t0 = Clock::now();
    double worst_forms = 0.0;
    double worst_fd = 0.0;
    double worst_invariance = 0.0;
    for (int i = 0; i < instances; ++i) {
        Rng pick = make_rng(derive_seed(0x7e01, static_cast<std::uint64_t>(i)));
        const int response_len = 2 + static_cast<int>(pick() % 2); // L in {2, 3}
        const int vocab = 2 + static_cast<int>(pick() % 2);        // |V| in {2, 3}
        const UnmaskMode mode = (pick() % 2 == 0) ? UnmaskMode::fixed_order : UnmaskMode::seeded_random;
        TinyInstance inst = make_tiny_instance(1000 + static_cast<std::uint64_t>(i), response_len, vocab, 1, mode);

        const GradVec reward_form = exact_gradient(inst.model, inst.query, inst.response_len, inst.reward,
                                                   inst.unmask, inst.temperature);
        const GradVec adv_form = exact_gradient_advantage(inst.model, inst.query, inst.response_len, inst.reward,
                                                          inst.unmask, inst.temperature);
        worst_forms = std::max(worst_forms, rel_error(reward_form, adv_form));

        // central finite differences of the enumerated objective
        DenoiserModel perturbed = inst.model;
        const std::size_t P = perturbed.params_mut().size();
        GradVec fd(P, 0.0);
        const double h = 1e-5;
        for (std::size_t p = 0; p < P; ++p) {
            const double orig = perturbed.params_mut()[p];
            perturbed.params_mut()[p] = orig + h;
            const double plus = exact_objective(perturbed, inst.query, inst.response_len, inst.reward,
                                                inst.unmask, inst.temperature);
            perturbed.params_mut()[p] = orig - h;
            const double minus = exact_objective(perturbed, inst.query, inst.response_len, inst.reward,
                                                 inst.unmask, inst.temperature);
            perturbed.params_mut()[p] = orig;
            fd[p] = (plus - minus) / (2.0 * h);
        }
        worst_fd = std::max(worst_fd, std::max(rel_error(reward_form, fd), rel_error(adv_form, fd)));

        // arbitrary action-independent baselines leave the gradient unchanged
        const std::uint64_t bseed = derive_seed(0xba5e, static_cast<std::uint64_t>(i));
        for (int b = 0; b < 5; ++b) {
            BaselineFn baseline;
            switch (b) {
            case 0: baseline = [](const MaskedSequence&) { return 0.37; }; break;
            case 1: baseline = [](const MaskedSequence& s) { return static_cast<double>(s.mask_count()); }; break;
            default:
                baseline = [bseed, b](const MaskedSequence& s) {
                    std::uint64_t h2 = bseed + static_cast<std::uint64_t>(b);
                    for (Token t : s.tokens) h2 = splitmix64(h2 ^ static_cast<std::uint64_t>(t + 2));
                    return static_cast<double>(h2 >> 11) * 0x1.0p-53 * 3.0 - 1.0;
                };
            }
            const GradVec alt = exact_gradient_advantage(inst.model, inst.query, inst.response_len, inst.reward,
                                                         inst.unmask, inst.temperature, baseline);
            double max_abs = 0.0;
            for (std::size_t p = 0; p < alt.size(); ++p)
                max_abs = std::max(max_abs, std::abs(alt[p] - reward_form[p]));
            worst_invariance = std::max(worst_invariance, max_abs);
        }
    }
    const double ms = elapsed_ms(t0);
    result.checks.push_back({"theorem1/reward-vs-advantage-form", worst_forms < 1e-6, worst_forms, 1e-6, ms});
    result.checks.push_back({"theorem1/forms-vs-finite-difference", worst_fd < 1e-6, worst_fd, 1e-6, ms});
    result.checks.push_back({"theorem1/baseline-invariance", worst_invariance < 1e-10, worst_invariance, 1e-10, ms});
    return result;
}

VerificationSuiteResult verify_lemma1(int instances) {
    VerificationSuiteResult result;
    const auto t0 = Clock::now();
    int violations = 0;
    double worst_margin = 0.0; // largest delta_s - bound observed
    for (int i = 0; i < instances; ++i) {
        Rng pick = make_rng(derive_seed(0x1e44a, static_cast<std::uint64_t>(i)));
        const int response_len = 2 + static_cast<int>(pick() % 2);
        const int vocab = 2 + static_cast<int>(pick() % 2);
        TinyInstance inst =
            make_tiny_instance(2000 + static_cast<std::uint64_t>(i), response_len, vocab, 1,
                               (pick() % 2 == 0) ? UnmaskMode::fixed_order : UnmaskMode::seeded_random);
        // random subset S of the steps
        std::vector<int> selected;
        for (int t = 0; t < response_len; ++t)
            if (pick() % 2 == 0) selected.push_back(t);
        const ErrorBoundReport report = verify_lemma_bound(inst.model, inst.query, inst.response_len, inst.reward,
                                                           inst.unmask, inst.temperature, selected);
        worst_margin = std::max(worst_margin, report.delta_s - report.bound);
        if (!report.holds()) ++violations;
    }
    result.checks.push_back({"lemma1/entropy-bound", violations == 0, static_cast<double>(violations), 0.0,
                             elapsed_ms(t0)});
    result.checks.push_back({"lemma1/worst-margin", worst_margin <= 1e-12, worst_margin, 1e-12, elapsed_ms(t0)});
    return result;
}

VerificationSuiteResult verify_prop1_suite(int instances) {
    VerificationSuiteResult result;
    const auto t0 = Clock::now();
    int violations = 0;
    for (int i = 0; i < instances; ++i) {
        Rng pick = make_rng(derive_seed(0x9409, static_cast<std::uint64_t>(i)));
        const int response_len = 3;
        const int vocab = 2 + static_cast<int>(pick() % 2);
        TinyInstance inst = make_tiny_instance(3000 + static_cast<std::uint64_t>(i), response_len, vocab, 1);

        // random partially masked state over the response region
        MaskedSequence x = initial_state(inst.query.prompt, response_len, vocab);
        std::uniform_int_distribution<Token> tok(0, vocab - 1);
        for (int l = 1; l < x.length(); ++l)
            if (pick() % 2 == 0) x.tokens[static_cast<std::size_t>(l)] = tok(pick);
        std::vector<int> masked = x.masked_positions();
        if (masked.empty()) {
            x.tokens[1] = x.mask;
            masked = x.masked_positions();
        }
        const int take = 1 + static_cast<int>(pick() % std::min<std::size_t>(2, masked.size()));
        std::vector<int> unmask(masked.begin(), masked.begin() + take);

        std::size_t n_outcomes = 1;
        for (int k = 0; k < take; ++k) n_outcomes *= static_cast<std::size_t>(vocab);
        std::vector<double> advantages(n_outcomes);
        std::uniform_real_distribution<double> adv(-1.0, 1.0);
        for (double& a : advantages) a = adv(pick);

        if (!verify_prop1(inst.model, x, unmask, advantages, inst.temperature)) ++violations;
    }
    result.checks.push_back({"prop1/score-and-gradient-bounds", violations == 0, static_cast<double>(violations),
                             0.0, elapsed_ms(t0)});
    return result;
}

VerificationSuiteResult verify_estimators(int n_samples) {
    VerificationSuiteResult result;
    const auto t0 = Clock::now();
    TinyInstance inst = make_tiny_instance(4242, 3, 2, 1);

    const GradVec exact = exact_gradient(inst.model, inst.query, inst.response_len, inst.reward, inst.unmask,
                                         inst.temperature);

    McOptions opt;
    opt.n_samples = n_samples;
    opt.seed = 777;
    opt.total_steps = inst.response_len;
    opt.temperature = inst.temperature;

    opt.baseline = BaselineMode::zero;
    const McGradientStats reinforce =
        mc_gradient_reinforce(inst.model, inst.query, inst.response_len, inst.reward, inst.unmask, opt);
    opt.baseline = BaselineMode::exact_value;
    const McGradientStats stepwise =
        mc_gradient_stepwise(inst.model, inst.query, inst.response_len, inst.reward, inst.unmask, opt);

    auto max_z = [&](const McGradientStats& stats) {
        const std::vector<double> se = stats.standard_errors();
        double worst = 0.0;
        for (std::size_t p = 0; p < exact.size(); ++p) {
            const double err = std::abs(stats.mean[p] - exact[p]);
            const double scale = std::max(se[p], 1e-12);
            worst = std::max(worst, err / scale);
        }
        return worst;
    };
    const double z_reinforce = max_z(reinforce);
    const double z_stepwise = max_z(stepwise);

    std::size_t lower = 0;
    for (std::size_t p = 0; p < exact.size(); ++p)
        if (stepwise.sample_variance[p] <= reinforce.sample_variance[p]) ++lower;
    const double frac_lower = static_cast<double>(lower) / static_cast<double>(exact.size());

    const double ms = elapsed_ms(t0);
    result.checks.push_back({"estimators/reinforce-within-4se", z_reinforce < 4.0, z_reinforce, 4.0, ms});
    result.checks.push_back({"estimators/stepwise-within-4se", z_stepwise < 4.0, z_stepwise, 4.0, ms});
    result.checks.push_back(
        {"estimators/stepwise-variance-reduction", frac_lower >= 0.8, frac_lower, 0.8, ms});
    return result;
}

VerificationSuiteResult verify_greedy_subset(int vectors) {
    VerificationSuiteResult result;
    const auto t0 = Clock::now();
    int failures = 0;
    for (int i = 0; i < vectors; ++i) {
        Rng rng = make_rng(derive_seed(0x70b5, static_cast<std::uint64_t>(i)));
        const int T = 4 + static_cast<int>(rng() % 9); // 4..12
        std::vector<double> h(static_cast<std::size_t>(T));
        std::uniform_real_distribution<double> unif(0.0, 2.0);
        for (double& x : h) x = unif(rng);
        if (i % 7 == 0) std::fill(h.begin(), h.end(), 0.5); // tied case
        for (int K = 1; K <= T; ++K)
            if (!verify_subset_optimality(h, K)) ++failures;
    }
    result.checks.push_back(
        {"greedy_subset/matches-exhaustive", failures == 0, static_cast<double>(failures), 0.0, elapsed_ms(t0)});
    return result;
}

VerificationSuiteResult verify_grpo_consistency(int instances) {
    VerificationSuiteResult result;
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        TinyInstance inst = make_tiny_instance(5000 + static_cast<std::uint64_t>(i), 3, 2, 1);
        const ConsistencyReport report = gradient_consistency_check(
            inst.model, inst.query, inst.response_len, inst.reward, inst.unmask, inst.temperature);
        worst = std::max(worst, report.relative_error);
    }
    result.checks.push_back({"grpo_consistency/neg-loss-grad-equals-policy-grad", worst < 1e-8, worst, 1e-8,
                             elapsed_ms(t0)});
    return result;
}

VerificationSuiteResult verify_gradients(int probes) {
    VerificationSuiteResult result;
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (int i = 0; i < probes; ++i) {
        Rng pick = make_rng(derive_seed(0x6ead, static_cast<std::uint64_t>(i)));
        const int vocab = 2 + static_cast<int>(pick() % 2);
        TinyInstance inst = make_tiny_instance(6000 + static_cast<std::uint64_t>(i), 3, vocab, 1);

        MaskedSequence x = initial_state(inst.query.prompt, inst.response_len, vocab);
        std::uniform_int_distribution<Token> tok(0, vocab - 1);
        for (int l = 1; l < x.length(); ++l)
            if (pick() % 3 == 0) x.tokens[static_cast<std::size_t>(l)] = tok(pick);
        std::vector<int> masked = x.masked_positions();
        if (masked.empty()) {
            x.tokens[2] = x.mask;
            masked = x.masked_positions();
        }
        const std::size_t n_unmask = 1 + pick() % masked.size();
        std::vector<int> unmask(masked.begin(), masked.begin() + static_cast<std::ptrdiff_t>(n_unmask));
        std::vector<Token> chosen;
        chosen.reserve(unmask.size());
        for (std::size_t k = 0; k < unmask.size(); ++k) chosen.push_back(tok(pick));
        const double temperature = (pick() % 2 == 0) ? 1.0 : 0.7;

        const GradVec analytic = inst.model.grad_log_prob(x, unmask, chosen, temperature);

        DenoiserModel perturbed = inst.model;
        const double h = 1e-5;
        double max_rel = 0.0;
        auto log_prob_at = [&]() {
            const LogitTable logits = perturbed.forward(x);
            double lp = 0.0;
            for (std::size_t k = 0; k < unmask.size(); ++k) {
                const std::vector<double> row = logits.row_log_probs(unmask[k], temperature);
                lp += row[static_cast<std::size_t>(chosen[k])];
            }
            return lp;
        };
        double denom = 0.0;
        for (double g : analytic) denom = std::max(denom, std::abs(g));
        for (std::size_t p = 0; p < analytic.size(); ++p) {
            const double orig = perturbed.params_mut()[p];
            perturbed.params_mut()[p] = orig + h;
            const double plus = log_prob_at();
            perturbed.params_mut()[p] = orig - h;
            const double minus = log_prob_at();
            perturbed.params_mut()[p] = orig;
            const double fd = (plus - minus) / (2.0 * h);
            max_rel = std::max(max_rel, std::abs(fd - analytic[p]) / std::max(denom, 1e-8));
        }
        worst = std::max(worst, max_rel);
    }
    result.checks.push_back({"gradients/logprob-vs-finite-difference", worst < 1e-5, worst, 1e-5, elapsed_ms(t0)});
    return result;
}

VerificationSuiteResult run_verification(const std::string& scope) {
    if (scope == "theorem1") return verify_theorem1();
    if (scope == "lemma1") return verify_lemma1();
    if (scope == "prop1") return verify_prop1_suite();
    if (scope == "estimators") return verify_estimators();
    if (scope == "greedy_subset") return verify_greedy_subset();
    if (scope == "grpo_consistency") return verify_grpo_consistency();
    if (scope == "all") {
        VerificationSuiteResult all;
        for (const char* s :
             {"theorem1", "lemma1", "prop1", "estimators", "greedy_subset", "grpo_consistency"}) {
            VerificationSuiteResult r = run_verification(s);
            all.checks.insert(all.checks.end(), r.checks.begin(), r.checks.end());
        }
        VerificationSuiteResult g = verify_gradients();
        all.checks.insert(all.checks.end(), g.checks.begin(), g.checks.end());
        return all;
    }
    throw std::invalid_argument("unknown verification scope '" + scope + "'");
}

} // namespace egspo

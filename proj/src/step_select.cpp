#include "egspo/step_select.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace egspo {

namespace {

double vec_norm(const GradVec& v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    return std::sqrt(sq);
}

} // namespace

StepSelection select_steps_entropy(const std::vector<double>& entropies, int budget) {
    if (budget < 1) throw std::invalid_argument("select_steps_entropy: budget must be >= 1");
    std::vector<int> order;
    for (int t = 0; t < static_cast<int>(entropies.size()); ++t)
        if (entropies[static_cast<std::size_t>(t)] >= 0.0) order.push_back(t);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const double ha = entropies[static_cast<std::size_t>(a)];
        const double hb = entropies[static_cast<std::size_t>(b)];
        if (ha != hb) return ha > hb;
        return a < b; // ties -> smaller diffusion index
    });
    StepSelection sel;
    sel.strategy = SelectStrategy::entropy_topk;
    sel.budget = budget;
    const int take = std::min<int>(budget, static_cast<int>(order.size()));
    sel.selected.assign(order.begin(), order.begin() + take);
    std::sort(sel.selected.begin(), sel.selected.end());
    return sel;
}

StepSelection select_steps_uniform(int total_steps, int budget) {
    if (budget < 1 || budget > total_steps)
        throw std::invalid_argument("select_steps_uniform: need 1 <= K <= T");
    StepSelection sel;
    sel.strategy = SelectStrategy::uniform;
    sel.budget = budget;
    for (int k = 0; k < budget; ++k) {
        const int t = static_cast<int>((static_cast<std::int64_t>(k) * total_steps) / budget);
        if (sel.selected.empty() || sel.selected.back() != t) sel.selected.push_back(t);
    }
    return sel;
}

StepSelection select_steps_random(int total_steps, int budget, Rng& rng) {
    if (budget < 1 || budget > total_steps)
        throw std::invalid_argument("select_steps_random: need 1 <= K <= T");
    std::vector<int> pool(static_cast<std::size_t>(total_steps));
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < budget; ++i) {
        std::uniform_int_distribution<int> pick(i, total_steps - 1);
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
    }
    StepSelection sel;
    sel.strategy = SelectStrategy::random;
    sel.budget = budget;
    sel.selected.assign(pool.begin(), pool.begin() + budget);
    std::sort(sel.selected.begin(), sel.selected.end());
    return sel;
}

bool verify_subset_optimality(const std::vector<double>& entropies, int budget) {
    const int T = static_cast<int>(entropies.size());
    if (T > 16) throw std::invalid_argument("verify_subset_optimality: T too large for brute force");
    const StepSelection greedy = select_steps_entropy(entropies, budget);
    double greedy_excluded = 0.0;
    for (int t = 0; t < T; ++t)
        if (!std::binary_search(greedy.selected.begin(), greedy.selected.end(), t))
            greedy_excluded += entropies[static_cast<std::size_t>(t)];

    const double total = std::accumulate(entropies.begin(), entropies.end(), 0.0);
    for (std::uint32_t mask = 0; mask < (1u << T); ++mask) {
        if (static_cast<int>(std::popcount(mask)) > budget) continue;
        double included = 0.0;
        for (int t = 0; t < T; ++t)
            if (mask & (1u << t)) included += entropies[static_cast<std::size_t>(t)];
        if (total - included < greedy_excluded - 1e-12) return false;
    }
    return true;
}

ErrorBoundReport verify_lemma_bound(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                    const RewardFn& reward, const UnmaskSchedule& unmask, double temperature,
                                    const std::vector<int>& selected_steps, const EnumLimits& limits) {
    const std::vector<GradVec> per_step =
        exact_step_gradients(model, query, response_len, reward, unmask, temperature, limits);
    ErrorBoundReport report;
    report.entropies = expected_step_entropies(model, query, response_len, unmask, temperature, limits);
    report.grad_bound = max_grad_norm_bound(model, query, response_len, unmask, temperature, limits);

    GradVec excluded(per_step.empty() ? 0 : per_step.front().size(), 0.0);
    double excluded_entropy = 0.0;
    for (std::size_t k = 0; k < per_step.size(); ++k) {
        // plan index k corresponds to diffusion step t = n_steps-1-k
        const int t = static_cast<int>(per_step.size()) - 1 - static_cast<int>(k);
        if (std::find(selected_steps.begin(), selected_steps.end(), t) != selected_steps.end()) continue;
        for (std::size_t p = 0; p < excluded.size(); ++p) excluded[p] += per_step[k][p];
        excluded_entropy += report.entropies[k];
    }
    report.delta_s = vec_norm(excluded);
    report.bound = report.grad_bound * excluded_entropy;
    return report;
}

bool verify_prop1(const DenoiserModel& model, const MaskedSequence& x_next, const std::vector<int>& unmask_positions,
                  const std::vector<double>& advantages, double temperature) {
    const int V = model.arch().vocab_size;
    const std::size_t n_pos = unmask_positions.size();
    std::size_t n_outcomes = 1;
    for (std::size_t i = 0; i < n_pos; ++i) {
        n_outcomes *= static_cast<std::size_t>(V);
        if (n_outcomes > 4096) throw std::invalid_argument("verify_prop1: outcome space too large");
    }
    if (advantages.size() != n_outcomes)
        throw std::invalid_argument("verify_prop1: advantages must cover every outcome");

    GradientTape tape = model.forward_with_tape(x_next);
    std::vector<std::vector<double>> rows;
    for (int pos : unmask_positions) rows.push_back(tape.logits.row_log_probs(pos, temperature));

    // per (position, token) score and raw-logit gradients
    const std::size_t P = static_cast<std::size_t>(model.arch().param_count());
    std::vector<std::vector<GradVec>> logit_grads(n_pos, std::vector<GradVec>(static_cast<std::size_t>(V)));
    for (std::size_t i = 0; i < n_pos; ++i) {
        for (Token v = 0; v < V; ++v) {
            std::vector<double> dlogits(tape.logits.values.size(), 0.0);
            dlogits[static_cast<std::size_t>(unmask_positions[i]) * V + v] = 1.0 / temperature;
            GradVec g(P, 0.0);
            tape.backward(dlogits, g);
            logit_grads[i][static_cast<std::size_t>(v)] = std::move(g);
        }
    }

    // enumerate joint outcomes
    std::vector<double> probs(n_outcomes);
    std::vector<GradVec> joint_logit_grads(n_outcomes, GradVec(P, 0.0));
    std::vector<Token> assign(n_pos, 0);
    for (std::size_t idx = 0; idx < n_outcomes; ++idx) {
        double lp = 0.0;
        GradVec& jg = joint_logit_grads[idx];
        for (std::size_t i = 0; i < n_pos; ++i) {
            lp += rows[i][static_cast<std::size_t>(assign[i])];
            const GradVec& g = logit_grads[i][static_cast<std::size_t>(assign[i])];
            for (std::size_t p = 0; p < P; ++p) jg[p] += g[p];
        }
        probs[idx] = std::exp(lp);
        int i = static_cast<int>(n_pos) - 1;
        while (i >= 0) {
            if (++assign[static_cast<std::size_t>(i)] < V) break;
            assign[static_cast<std::size_t>(i)] = 0;
            --i;
        }
    }

    // ||grad g||: max pairwise gap of joint logit gradients
    double gap = 0.0;
    for (std::size_t a = 0; a < n_outcomes; ++a) {
        for (std::size_t b = a + 1; b < n_outcomes; ++b) {
            double sq = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
                const double d = joint_logit_grads[a][p] - joint_logit_grads[b][p];
                sq += d * d;
            }
            gap = std::max(gap, std::sqrt(sq));
        }
    }

    // score gradients: grad log pi_i = grad g_i - sum_j pi_j grad g_j
    GradVec mean_logit_grad(P, 0.0);
    for (std::size_t idx = 0; idx < n_outcomes; ++idx)
        for (std::size_t p = 0; p < P; ++p) mean_logit_grad[p] += probs[idx] * joint_logit_grads[idx][p];

    double entropy = 0.0;
    double max_abs_adv = 0.0;
    GradVec weighted(P, 0.0);
    const double slack = 1e-9;
    for (std::size_t idx = 0; idx < n_outcomes; ++idx) {
        const double pi = probs[idx];
        entropy -= pi * std::log(pi);
        max_abs_adv = std::max(max_abs_adv, std::abs(advantages[idx]));
        GradVec score(P);
        for (std::size_t p = 0; p < P; ++p) score[p] = joint_logit_grads[idx][p] - mean_logit_grad[p];
        const double score_norm = vec_norm(score);
        if (score_norm > (1.0 - pi) * gap + slack) return false;
        if (score_norm > (-std::log(pi)) * gap + slack) return false;
        for (std::size_t p = 0; p < P; ++p) weighted[p] += pi * advantages[idx] * score[p];
    }
    return vec_norm(weighted) <= entropy * max_abs_adv * gap + slack;
}

} // namespace egspo

#include "egspo/pg.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

namespace egspo {

namespace {

void axpy(GradVec& y, double a, const GradVec& x) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

void check_cap(const MaskedSequence& start, int vocab, const EnumLimits& limits) {
    const int masks = start.mask_count();
    double outcomes = 1.0;
    for (int i = 0; i < masks; ++i) {
        outcomes *= static_cast<double>(vocab);
        if (outcomes > static_cast<double>(limits.max_outcomes))
            throw EnumerationCapExceeded("instance too large: " + std::to_string(masks) + " masks over " +
                                         std::to_string(vocab) + " tokens exceeds the enumeration cap");
    }
}

// Depth-first enumeration over the deterministic unmask plan. States and
// per-edge score gradients live on stacks indexed by depth; leaves see the
// whole path. Assignment order is lexicographic by (step, position, token),
// which fixes the reduction order bit-for-bit.
struct Walker {
    const DenoiserModel& model;
    double temperature;
    std::vector<std::vector<int>> plan;
    bool with_grads = false;

    std::vector<MaskedSequence> states;              // depth+1 entries live
    std::vector<GradVec> edge_grads;                 // grad log pi at each step
    std::vector<double> edge_entropies;              // step entropy at each node (same for siblings)

    using LeafFn = std::function<void(const Walker&, double prob, double log_prob)>;
    // called once per node before descending, with the node's depth and prob
    using NodeFn = std::function<void(const Walker&, int depth, double prob)>;

    LeafFn on_leaf;
    NodeFn on_node;

    Walker(const DenoiserModel& m, const MaskedSequence& start, const UnmaskSchedule& unmask, double temp,
           int response_begin)
        : model(m), temperature(temp) {
        plan = plan_unmask_sequence(start, unmask, response_begin);
        states.assign(plan.size() + 1, MaskedSequence{});
        states[0] = start;
        edge_grads.assign(plan.size(), GradVec{});
        edge_entropies.assign(plan.size(), 0.0);
    }

    void run() { descend(0, 1.0, 0.0); }

private:
    void descend(int depth, double prob, double log_prob) {
        if (depth == static_cast<int>(plan.size())) {
            on_leaf(*this, prob, log_prob);
            return;
        }
        const MaskedSequence& s = states[static_cast<std::size_t>(depth)];
        const std::vector<int>& U = plan[static_cast<std::size_t>(depth)];
        const int V = model.arch().vocab_size;

        GradientTape tape = model.forward_with_tape(s);
        std::vector<std::vector<double>> rows;
        rows.reserve(U.size());
        double node_entropy = 0.0;
        for (int pos : U) {
            rows.push_back(tape.logits.row_log_probs(pos, temperature));
            node_entropy += tape.logits.row_entropy(pos, temperature);
        }
        edge_entropies[static_cast<std::size_t>(depth)] = node_entropy;
        if (on_node) on_node(*this, depth, prob);

        // per (position, token) score gradients, shared by all assignments
        std::vector<std::vector<GradVec>> glp;
        if (with_grads) {
            glp.resize(U.size());
            for (std::size_t i = 0; i < U.size(); ++i) {
                glp[i].resize(static_cast<std::size_t>(V));
                const std::vector<double> probs = tape.logits.row_probs(U[i], temperature);
                for (Token v = 0; v < V; ++v) {
                    std::vector<double> dlogits(tape.logits.values.size(), 0.0);
                    double* row = dlogits.data() + static_cast<std::size_t>(U[i]) * V;
                    for (Token u = 0; u < V; ++u)
                        row[u] = (((u == v) ? 1.0 : 0.0) - probs[static_cast<std::size_t>(u)]) / temperature;
                    GradVec g(static_cast<std::size_t>(model.arch().param_count()), 0.0);
                    tape.backward(dlogits, g);
                    glp[i][static_cast<std::size_t>(v)] = std::move(g);
                }
            }
        }

        std::vector<Token> assign(U.size(), 0);
        for (;;) {
            double lp = 0.0;
            for (std::size_t i = 0; i < U.size(); ++i) lp += rows[i][static_cast<std::size_t>(assign[i])];

            MaskedSequence child = s;
            for (std::size_t i = 0; i < U.size(); ++i)
                child.tokens[static_cast<std::size_t>(U[i])] = assign[i];
            states[static_cast<std::size_t>(depth) + 1] = std::move(child);

            if (with_grads) {
                GradVec edge(static_cast<std::size_t>(model.arch().param_count()), 0.0);
                for (std::size_t i = 0; i < U.size(); ++i) axpy(edge, 1.0, glp[i][static_cast<std::size_t>(assign[i])]);
                edge_grads[static_cast<std::size_t>(depth)] = std::move(edge);
            }

            descend(depth + 1, prob * std::exp(lp), log_prob + lp);

            // odometer: last position is least significant
            int i = static_cast<int>(U.size()) - 1;
            while (i >= 0) {
                if (++assign[static_cast<std::size_t>(i)] < V) break;
                assign[static_cast<std::size_t>(i)] = 0;
                --i;
            }
            if (i < 0) break;
        }
    }
};

std::string state_key(const MaskedSequence& s) {
    return std::string(reinterpret_cast<const char*>(s.tokens.data()), s.tokens.size() * sizeof(Token));
}

} // namespace

EnumeratedDistribution enumerate_completions(const DenoiserModel& model, const MaskedSequence& x_start,
                                             const UnmaskSchedule& unmask, double temperature,
                                             const EnumLimits& limits) {
    check_cap(x_start, model.arch().vocab_size, limits);
    EnumeratedDistribution dist;
    Walker w(model, x_start, unmask, temperature, 0);
    w.on_leaf = [&](const Walker& walker, double prob, double log_prob) {
        EnumeratedOutcome out;
        out.states = walker.states;
        out.probability = prob;
        out.log_prob = log_prob;
        dist.outcomes.push_back(std::move(out));
        dist.total_prob += prob;
    };
    w.run();
    return dist;
}

double exact_value(const DenoiserModel& model, const MaskedSequence& x_t, const TaskQuery& query,
                   const RewardFn& reward, const UnmaskSchedule& unmask, double temperature,
                   const EnumLimits& limits) {
    if (x_t.mask_count() == 0) return reward(x_t, query);
    check_cap(x_t, model.arch().vocab_size, limits);
    double value = 0.0;
    Walker w(model, x_t, unmask, temperature, 0);
    w.on_leaf = [&](const Walker& walker, double prob, double) {
        value += prob * reward(walker.states.back(), query);
    };
    w.run();
    return value;
}

double exact_objective(const DenoiserModel& model, const TaskQuery& query, int response_len,
                       const RewardFn& reward, const UnmaskSchedule& unmask, double temperature,
                       const EnumLimits& limits) {
    const MaskedSequence start = initial_state(query.prompt, response_len, model.arch().vocab_size);
    return exact_value(model, start, query, reward, unmask, temperature, limits);
}

GradVec exact_gradient(const DenoiserModel& model, const TaskQuery& query, int response_len,
                       const RewardFn& reward, const UnmaskSchedule& unmask, double temperature,
                       const EnumLimits& limits) {
    const MaskedSequence start = initial_state(query.prompt, response_len, model.arch().vocab_size);
    check_cap(start, model.arch().vocab_size, limits);
    GradVec total(static_cast<std::size_t>(model.arch().param_count()), 0.0);
    Walker w(model, start, unmask, temperature, 0);
    w.with_grads = true;
    w.on_leaf = [&](const Walker& walker, double prob, double) {
        const double r = reward(walker.states.back(), query);
        const double weight = prob * r;
        for (const GradVec& g : walker.edge_grads) axpy(total, weight, g);
    };
    w.run();
    return total;
}

GradVec exact_gradient_advantage(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                 const RewardFn& reward, const UnmaskSchedule& unmask, double temperature,
                                 const BaselineFn& baseline, const EnumLimits& limits) {
    const MaskedSequence start = initial_state(query.prompt, response_len, model.arch().vocab_size);
    check_cap(start, model.arch().vocab_size, limits);
    ValueOracle values(model, query, reward, unmask, temperature, limits);
    const BaselineFn b = baseline ? baseline : BaselineFn([&](const MaskedSequence& s) { return values.value(s); });

    // per-state baselines looked up once per node, not per leaf
    std::vector<double> node_baseline;
    GradVec total(static_cast<std::size_t>(model.arch().param_count()), 0.0);
    Walker w(model, start, unmask, temperature, 0);
    w.with_grads = true;
    node_baseline.assign(w.plan.size(), 0.0);
    w.on_node = [&](const Walker& walker, int depth, double) {
        if (depth < static_cast<int>(walker.plan.size()))
            node_baseline[static_cast<std::size_t>(depth)] = b(walker.states[static_cast<std::size_t>(depth)]);
    };
    w.on_leaf = [&](const Walker& walker, double prob, double) {
        const double r = reward(walker.states.back(), query);
        for (std::size_t k = 0; k < walker.edge_grads.size(); ++k)
            axpy(total, prob * (r - node_baseline[k]), walker.edge_grads[k]);
    };
    w.run();
    return total;
}

std::vector<GradVec> exact_step_gradients(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                          const RewardFn& reward, const UnmaskSchedule& unmask,
                                          double temperature, const EnumLimits& limits) {
    const MaskedSequence start = initial_state(query.prompt, response_len, model.arch().vocab_size);
    check_cap(start, model.arch().vocab_size, limits);
    Walker w(model, start, unmask, temperature, 0);
    w.with_grads = true;
    std::vector<GradVec> per_step(w.plan.size(),
                                  GradVec(static_cast<std::size_t>(model.arch().param_count()), 0.0));
    w.on_leaf = [&](const Walker& walker, double prob, double) {
        const double r = reward(walker.states.back(), query);
        for (std::size_t k = 0; k < walker.edge_grads.size(); ++k)
            axpy(per_step[k], prob * r, walker.edge_grads[k]);
    };
    w.run();
    return per_step;
}

std::vector<double> expected_step_entropies(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                            const UnmaskSchedule& unmask, double temperature,
                                            const EnumLimits& limits) {
    const MaskedSequence start = initial_state(query.prompt, response_len, model.arch().vocab_size);
    check_cap(start, model.arch().vocab_size, limits);
    Walker w(model, start, unmask, temperature, 0);
    std::vector<double> out(w.plan.size(), 0.0);
    w.on_node = [&](const Walker& walker, int depth, double prob) {
        out[static_cast<std::size_t>(depth)] += prob * walker.edge_entropies[static_cast<std::size_t>(depth)];
    };
    w.on_leaf = [](const Walker&, double, double) {};
    w.run();
    return out;
}

double max_grad_norm_bound(const DenoiserModel& model, const TaskQuery& query, int response_len,
                           const UnmaskSchedule& unmask, double temperature, const EnumLimits& limits) {
    const MaskedSequence start = initial_state(query.prompt, response_len, model.arch().vocab_size);
    check_cap(start, model.arch().vocab_size, limits);
    double best = 0.0;
    Walker w(model, start, unmask, temperature, 0);
    w.on_node = [&](const Walker& walker, int depth, double) {
        if (depth >= static_cast<int>(walker.plan.size())) return;
        best = std::max(best, model.grad_norm_bound(walker.states[static_cast<std::size_t>(depth)], temperature));
    };
    w.on_leaf = [](const Walker&, double, double) {};
    w.run();
    return best;
}

double ValueOracle::value(const MaskedSequence& x_t) {
    const std::string key = state_key(x_t);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const double v = exact_value(model_, x_t, query_, reward_, unmask_, temperature_, limits_);
    cache_.emplace(key, v);
    return v;
}

std::vector<double> McGradientStats::standard_errors() const {
    std::vector<double> out(mean.size(), 0.0);
    for (std::size_t i = 0; i < mean.size(); ++i)
        out[i] = std::sqrt(std::max(0.0, sample_variance[i]) / static_cast<double>(n));
    return out;
}

namespace {

// Shared Monte-Carlo loop. baseline(traj, step_index) must be pure and must
// not consume the sampling rng, so matched seeds give matched trajectories
// across estimators.
McGradientStats run_mc(const DenoiserModel& model, const TaskQuery& query, int response_len,
                       const RewardFn& reward, const UnmaskSchedule& unmask, const McOptions& opt,
                       const std::function<double(const Trajectory&, std::size_t, double)>& baseline) {
    if (opt.n_samples < 1) throw std::invalid_argument("mc gradient: n_samples must be >= 1");
    const std::size_t P = static_cast<std::size_t>(model.arch().param_count());
    McGradientStats stats;
    stats.mean.assign(P, 0.0);
    stats.sample_variance.assign(P, 0.0);
    GradVec m2(P, 0.0), sample(P, 0.0), delta(P, 0.0);

    Rng rng = make_rng(opt.seed);
    RolloutOptions ropts;
    ropts.temperature = opt.temperature;
    for (int i = 0; i < opt.n_samples; ++i) {
        const Trajectory traj = rollout(model, query.prompt, response_len, opt.total_steps, unmask, rng, ropts);
        const double r = reward(traj.final_state(), query);
        std::fill(sample.begin(), sample.end(), 0.0);
        for (std::size_t k = 0; k < traj.steps.size(); ++k) {
            const TrajectoryStep& step = traj.steps[k];
            if (step.unmask_positions.empty()) continue;
            const GradVec g = model.grad_log_prob(traj.states[k], step.unmask_positions, step.chosen,
                                                  opt.temperature);
            const double advantage = r - baseline(traj, k, r);
            axpy(sample, advantage, g);
        }
        // Welford update
        stats.n += 1;
        const double inv_n = 1.0 / static_cast<double>(stats.n);
        for (std::size_t p = 0; p < P; ++p) {
            delta[p] = sample[p] - stats.mean[p];
            stats.mean[p] += delta[p] * inv_n;
            m2[p] += delta[p] * (sample[p] - stats.mean[p]);
        }
    }
    if (stats.n > 1) {
        for (std::size_t p = 0; p < P; ++p)
            stats.sample_variance[p] = m2[p] / static_cast<double>(stats.n - 1);
    }
    return stats;
}

} // namespace

McGradientStats mc_gradient_reinforce(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                      const RewardFn& reward, const UnmaskSchedule& unmask, const McOptions& opt) {
    return run_mc(model, query, response_len, reward, unmask, opt,
                  [](const Trajectory&, std::size_t, double) { return 0.0; });
}

McGradientStats mc_gradient_stepwise(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                     const RewardFn& reward, const UnmaskSchedule& unmask, const McOptions& opt) {
    switch (opt.baseline) {
    case BaselineMode::zero:
        return run_mc(model, query, response_len, reward, unmask, opt,
                      [](const Trajectory&, std::size_t, double) { return 0.0; });
    case BaselineMode::one_step_greedy:
        return run_mc(model, query, response_len, reward, unmask, opt,
                      [&](const Trajectory& traj, std::size_t k, double) {
                          const MaskedSequence greedy(traj.steps[k].greedy_completion,
                                                      traj.states[k].mask);
                          return reward(greedy, query);
                      });
    case BaselineMode::exact_value: {
        auto oracle = std::make_shared<ValueOracle>(model, query, reward, unmask, opt.temperature, opt.limits);
        return run_mc(model, query, response_len, reward, unmask, opt,
                      [oracle](const Trajectory& traj, std::size_t k, double) {
                          return oracle->value(traj.states[k]);
                      });
    }
    }
    throw std::logic_error("mc_gradient_stepwise: unknown baseline mode");
}

double one_step_value(const DenoiserModel& model, const MaskedSequence& x_t, const TaskQuery& query,
                      const RewardFn& reward, OneStepMode mode, double temperature, const EnumLimits& limits) {
    if (x_t.mask_count() == 0) return reward(x_t, query);
    if (mode == OneStepMode::greedy) return reward(greedy_complete(model, x_t), query);

    check_cap(x_t, model.arch().vocab_size, limits);
    const LogitTable logits = model.forward(x_t);
    const std::vector<int> masked = x_t.masked_positions();
    std::vector<std::vector<double>> rows;
    rows.reserve(masked.size());
    for (int pos : masked) rows.push_back(logits.row_log_probs(pos, temperature));

    const int V = model.arch().vocab_size;
    std::vector<Token> assign(masked.size(), 0);
    MaskedSequence x0 = x_t;
    double value = 0.0;
    for (;;) {
        double lp = 0.0;
        for (std::size_t i = 0; i < masked.size(); ++i) {
            lp += rows[i][static_cast<std::size_t>(assign[i])];
            x0.tokens[static_cast<std::size_t>(masked[i])] = assign[i];
        }
        value += std::exp(lp) * reward(x0, query);
        int i = static_cast<int>(masked.size()) - 1;
        while (i >= 0) {
            if (++assign[static_cast<std::size_t>(i)] < V) break;
            assign[static_cast<std::size_t>(i)] = 0;
            --i;
        }
        if (i < 0) break;
    }
    return value;
}

MaskedSequence greedy_complete(const DenoiserModel& model, const MaskedSequence& x_t,
                               std::uint64_t* forward_passes) {
    if (x_t.mask_count() == 0) return x_t;
    if (forward_passes) ++*forward_passes;
    const LogitTable logits = model.forward(x_t);
    MaskedSequence out = x_t;
    for (int l = 0; l < out.length(); ++l)
        if (out.is_masked(l)) out.tokens[static_cast<std::size_t>(l)] = logits.row_argmax(l);
    return out;
}

double stepwise_advantage(double reward, double baseline, double lambda_t) {
    if (lambda_t < 0.0 || lambda_t > 1.0)
        throw std::invalid_argument("stepwise_advantage: lambda must lie in [0, 1]");
    return (1.0 + lambda_t) * reward - lambda_t * baseline;
}

} // namespace egspo

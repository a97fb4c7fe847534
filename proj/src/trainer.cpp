#include "egspo/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace egspo {

Strategy strategy_from_string(const std::string& s) {
    if (s == "egspo") return Strategy::egspo;
    if (s == "egspo_sa") return Strategy::egspo_sa;
    if (s == "uspo") return Strategy::uspo;
    if (s == "rspo") return Strategy::rspo;
    if (s == "full") return Strategy::full;
    throw std::invalid_argument("unknown strategy '" + s + "'");
}

std::string strategy_to_string(Strategy s) {
    switch (s) {
    case Strategy::egspo: return "egspo";
    case Strategy::egspo_sa: return "egspo_sa";
    case Strategy::uspo: return "uspo";
    case Strategy::rspo: return "rspo";
    case Strategy::full: return "full";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (group_size < 2) throw std::invalid_argument("TrainConfig: G must be >= 2");
    if (step_budget < 1) throw std::invalid_argument("TrainConfig: K must be >= 1");
    if (!(clip_eps > 0.0)) throw std::invalid_argument("TrainConfig: clip_eps must be > 0 (or infinity)");
    if (kl_beta < 0.0) throw std::invalid_argument("TrainConfig: kl_beta must be >= 0");
    if (temperature <= 0.0) throw std::invalid_argument("TrainConfig: temperature must be > 0");
    if (inner_epochs < 1) throw std::invalid_argument("TrainConfig: inner_epochs must be >= 1");
    const bool lambda_zero = lambda_schedule.initial == 0.0;
    if ((strategy == Strategy::egspo || strategy == Strategy::uspo || strategy == Strategy::rspo) && !lambda_zero)
        throw std::invalid_argument("TrainConfig: strategy '" + strategy_to_string(strategy) +
                                    "' requires lambda = 0");
    const int needed = (response_len + unmask.tokens_per_step - 1) / unmask.tokens_per_step;
    if (needed > total_steps)
        throw std::invalid_argument("TrainConfig: T * tokens_per_step cannot cover the response");
}

double grpo_step_loss(double ratio, double advantage, double clip_eps, double kl_term, double kl_beta) {
    if (!(ratio > 0.0)) throw std::invalid_argument("grpo_step_loss: ratio must be > 0");
    const double clipped = std::isinf(clip_eps) ? ratio : std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    return -std::min(ratio * advantage, clipped * advantage) + kl_beta * kl_term;
}

double kl_estimate(double logp_theta, double logp_ref) {
    const double d = logp_ref - logp_theta;
    return std::exp(d) - d - 1.0;
}

namespace {

double step_entropy_for_selection(const TrajectoryStep& step, EntropyAggregation agg) {
    if (step.unmask_positions.empty()) return -1.0; // not selectable
    if (agg == EntropyAggregation::mean)
        return step.entropy / static_cast<double>(step.unmask_positions.size());
    return step.entropy;
}

// Log-probability of the realized transition under `model`, same code path
// as the rollout recording so equal parameters give bitwise-equal values.
double transition_log_prob(const DenoiserModel& model, const MaskedSequence& x_next,
                           const TrajectoryStep& step, double temperature) {
    const LogitTable logits = model.forward(x_next);
    double lp = 0.0;
    for (std::size_t i = 0; i < step.unmask_positions.size(); ++i) {
        const std::vector<double> row = logits.row_log_probs(step.unmask_positions[i], temperature);
        lp += row[static_cast<std::size_t>(step.chosen[i])];
    }
    return lp;
}

} // namespace

GroupRollout collect_group(const DenoiserModel& model_old, const DenoiserModel& model_ref,
                           const TaskQuery& query, const RewardFn& reward, const TrainConfig& config,
                           int update_index, std::uint64_t rollout_seed, ComputeCounters& counters) {
    const int G = config.group_size;
    GroupRollout group;
    group.query = query;
    group.members.resize(static_cast<std::size_t>(G));
    group.selected_step_histogram.assign(static_cast<std::size_t>(config.total_steps), 0);

    // G independent rollouts under the frozen sampling policy; each member
    // owns a derived rng stream so the result is scheduling-invariant.
    std::vector<std::uint64_t> member_passes(static_cast<std::size_t>(G), 0);
    auto run_member = [&](int j) {
        Rng rng = make_rng(derive_seed(rollout_seed, static_cast<std::uint64_t>(j)));
        RolloutOptions opts;
        opts.temperature = config.temperature;
        opts.forward_passes = &member_passes[static_cast<std::size_t>(j)];
        GroupMember& member = group.members[static_cast<std::size_t>(j)];
        member.trajectory = rollout(model_old, query.prompt, config.response_len, config.total_steps,
                                    config.unmask, rng, opts);
        member.reward = reward(member.trajectory.final_state(), query);
    };
    if (config.threads > 1) {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        const int n_threads = std::min(config.threads, G);
        for (int w = 0; w < n_threads; ++w) {
            pool.emplace_back([&] {
                for (int j = next.fetch_add(1); j < G; j = next.fetch_add(1)) run_member(j);
            });
        }
        for (auto& th : pool) th.join();
    } else {
        for (int j = 0; j < G; ++j) run_member(j);
    }
    for (std::uint64_t n : member_passes) counters.add_forward_passes(n, model_old.arch().per_pass_macs());
    counters.samples += static_cast<std::uint64_t>(G);

    const double lambda = config.lambda_schedule.value(update_index);
    Rng select_rng = make_rng(derive_seed(rollout_seed, 0x5e1ec7ULL));

    double entropy_sum = 0.0;
    std::uint64_t entropy_count = 0;
    for (int j = 0; j < G; ++j) {
        GroupMember& member = group.members[static_cast<std::size_t>(j)];
        const Trajectory& traj = member.trajectory;
        group.mean_reward += member.reward;
        for (const TrajectoryStep& s : traj.steps) {
            if (s.unmask_positions.empty()) continue;
            entropy_sum += s.entropy;
            ++entropy_count;
        }

        // step selection over this trajectory
        std::vector<int> chosen_steps;
        switch (config.strategy) {
        case Strategy::egspo:
        case Strategy::egspo_sa: {
            std::vector<double> h(traj.steps.size());
            for (std::size_t k = 0; k < traj.steps.size(); ++k) {
                // entropies indexed by diffusion step t
                const TrajectoryStep& s = traj.steps[k];
                h[static_cast<std::size_t>(s.t)] = step_entropy_for_selection(s, config.entropy_aggregation);
            }
            chosen_steps = select_steps_entropy(h, config.step_budget).selected;
            break;
        }
        case Strategy::uspo:
            chosen_steps = select_steps_uniform(config.total_steps, config.step_budget).selected;
            break;
        case Strategy::rspo:
            chosen_steps = select_steps_random(config.total_steps, config.step_budget, select_rng).selected;
            break;
        case Strategy::full:
            for (const TrajectoryStep& s : traj.steps)
                if (!s.unmask_positions.empty()) chosen_steps.push_back(s.t);
            std::sort(chosen_steps.begin(), chosen_steps.end());
            break;
        }

        // steps stored t = T-1 first; selected list ordered by descending t
        std::sort(chosen_steps.rbegin(), chosen_steps.rend());
        for (int t : chosen_steps) {
            const std::size_t k = static_cast<std::size_t>(config.total_steps - 1 - t);
            const TrajectoryStep& s = traj.steps[k];
            SelectedStep sel;
            sel.t = t;
            sel.step_index = k;
            sel.lambda = lambda;
            if (s.unmask_positions.empty()) {
                sel.baseline_reward = member.reward; // degenerate no-op step
            } else {
                const MaskedSequence greedy(s.greedy_completion, traj.states[k].mask);
                sel.baseline_reward = reward(greedy, query);
            }
            sel.advantage_raw = stepwise_advantage(member.reward, sel.baseline_reward, lambda);
            if (config.kl_beta > 0.0 && !s.unmask_positions.empty()) {
                counters.add_forward_passes(1, model_ref.arch().per_pass_macs());
                sel.ref_log_prob = transition_log_prob(model_ref, traj.states[k], s, config.temperature);
            }
            member.selected.push_back(sel);
            group.selected_step_histogram[static_cast<std::size_t>(t)] += 1;
        }
    }
    group.mean_reward /= static_cast<double>(G);
    group.mean_entropy = entropy_count > 0 ? entropy_sum / static_cast<double>(entropy_count) : 0.0;

    // center advantages across the group
    if (config.center_mode == CenterMode::per_rank) {
        std::size_t max_rank = 0;
        for (const GroupMember& m : group.members) max_rank = std::max(max_rank, m.selected.size());
        for (std::size_t rank = 0; rank < max_rank; ++rank) {
            double mean = 0.0;
            int count = 0;
            for (const GroupMember& m : group.members) {
                if (rank < m.selected.size()) {
                    mean += m.selected[rank].advantage_raw;
                    ++count;
                }
            }
            if (count == 0) continue;
            mean /= static_cast<double>(count);
            for (GroupMember& m : group.members)
                if (rank < m.selected.size()) m.selected[rank].advantage = m.selected[rank].advantage_raw - mean;
        }
    } else {
        double mean = 0.0;
        int count = 0;
        for (const GroupMember& m : group.members) {
            for (const SelectedStep& s : m.selected) {
                mean += s.advantage_raw;
                ++count;
            }
        }
        if (count > 0) mean /= static_cast<double>(count);
        for (GroupMember& m : group.members)
            for (SelectedStep& s : m.selected) s.advantage = s.advantage_raw - mean;
    }
    return group;
}

namespace {

struct AdamState {
    GradVec m, v;
    std::int64_t step = 0;
};

// Gradient-descent step on `loss_grad` (the gradient of the loss, so theta
// moves along -loss_grad).
void apply_update(DenoiserModel& model, const GradVec& loss_grad, const TrainConfig& config, AdamState& adam) {
    std::span<double> params = model.params_mut();
    if (config.optimizer == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= config.learning_rate * loss_grad[i];
        return;
    }
    if (adam.m.empty()) {
        adam.m.assign(params.size(), 0.0);
        adam.v.assign(params.size(), 0.0);
    }
    adam.step += 1;
    const AdamParams& ap = config.adam;
    const double bc1 = 1.0 - std::pow(ap.beta1, static_cast<double>(adam.step));
    const double bc2 = 1.0 - std::pow(ap.beta2, static_cast<double>(adam.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        adam.m[i] = ap.beta1 * adam.m[i] + (1.0 - ap.beta1) * loss_grad[i];
        adam.v[i] = ap.beta2 * adam.v[i] + (1.0 - ap.beta2) * loss_grad[i] * loss_grad[i];
        const double mhat = adam.m[i] / bc1;
        const double vhat = adam.v[i] / bc2;
        params[i] -= config.learning_rate * (mhat / (std::sqrt(vhat) + ap.eps) + ap.weight_decay * params[i]);
    }
}

} // namespace

TrainResult train(DenoiserModel model, const RewardTask& task, const TrainConfig& config,
                  const MetricsSink& metrics, const CheckpointHook& checkpoint) {
    config.validate();
    if (task.response_len != config.response_len || task.vocab_size != config.vocab_size)
        throw std::invalid_argument("train: task dimensions do not match config");
    if (task.seq_len() != model.arch().seq_len)
        throw std::invalid_argument("train: model arch does not match task");

    const DenoiserModel model_ref = model; // frozen reference for the KL term
    ComputeCounters counters;
    AdamState adam;
    const std::size_t P = static_cast<std::size_t>(model.arch().param_count());
    GradVec loss_grad(P, 0.0);
    Rng query_rng = make_rng(derive_seed(config.seed, 0x9e7715ULL));
    TrainResult result{std::move(model), counters, 0.0};

    for (int update = 0; update < config.updates; ++update) {
        const auto t0 = std::chrono::steady_clock::now();
        const TaskQuery query = task.sample_query(query_rng);
        const DenoiserModel model_old = result.model; // snapshot; rollouts and ratios use it
        const std::uint64_t rollout_seed = derive_seed(config.seed, 0x700aULL + static_cast<std::uint64_t>(update));
        GroupRollout group =
            collect_group(model_old, model_ref, query, task.reward, config, update, rollout_seed, counters);

        double loss_value = 0.0;
        double kl_value = 0.0;
        for (int epoch = 0; epoch < config.inner_epochs; ++epoch) {
            std::fill(loss_grad.begin(), loss_grad.end(), 0.0);
            loss_value = 0.0;
            kl_value = 0.0;
            std::uint64_t kl_count = 0;
            for (const GroupMember& member : group.members) {
                for (const SelectedStep& sel : member.selected) {
                    const TrajectoryStep& step = member.trajectory.steps[sel.step_index];
                    if (step.unmask_positions.empty()) continue;
                    const MaskedSequence& x_next = member.trajectory.states[sel.step_index];

                    counters.add_forward_passes(1, result.model.arch().per_pass_macs());
                    const GradientTape tape = result.model.forward_with_tape(x_next);
                    double logp_theta = 0.0;
                    for (std::size_t i = 0; i < step.unmask_positions.size(); ++i) {
                        const std::vector<double> row =
                            tape.logits.row_log_probs(step.unmask_positions[i], config.temperature);
                        logp_theta += row[static_cast<std::size_t>(step.chosen[i])];
                    }
                    const double ratio = std::exp(logp_theta - step.log_prob);
                    const double kl =
                        config.kl_beta > 0.0 ? kl_estimate(logp_theta, sel.ref_log_prob) : 0.0;
                    loss_value += grpo_step_loss(ratio, sel.advantage, config.clip_eps, kl, config.kl_beta);
                    if (config.kl_beta > 0.0) {
                        kl_value += kl;
                        ++kl_count;
                    }

                    // d/dtheta of the surrogate: active only on the unclipped
                    // branch; the k3 KL term contributes (1 - e^d) d logp.
                    const double clipped = std::isinf(config.clip_eps)
                                               ? ratio
                                               : std::clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps);
                    const bool unclipped_active = ratio * sel.advantage <= clipped * sel.advantage;
                    double coeff = 0.0;
                    if (unclipped_active) coeff -= sel.advantage * ratio;
                    if (config.kl_beta > 0.0)
                        coeff += config.kl_beta * (1.0 - std::exp(sel.ref_log_prob - logp_theta));
                    if (coeff != 0.0) {
                        std::vector<double> dlogits(tape.logits.values.size(), 0.0);
                        const int V = result.model.arch().vocab_size;
                        for (std::size_t i = 0; i < step.unmask_positions.size(); ++i) {
                            const int pos = step.unmask_positions[i];
                            const std::vector<double> probs = tape.logits.row_probs(pos, config.temperature);
                            double* row = dlogits.data() + static_cast<std::size_t>(pos) * V;
                            for (int v = 0; v < V; ++v)
                                row[v] += coeff *
                                          (((v == step.chosen[i]) ? 1.0 : 0.0) - probs[static_cast<std::size_t>(v)]) /
                                          config.temperature;
                        }
                        tape.backward(dlogits, loss_grad);
                    }
                }
            }
            const double inv_g = 1.0 / static_cast<double>(config.group_size);
            loss_value *= inv_g;
            for (double& x : loss_grad) x *= inv_g;
            if (!std::isfinite(loss_value))
                throw std::runtime_error("train: non-finite loss, aborting");
            apply_update(result.model, loss_grad, config, adam);
            counters.gradient_steps += 1;
            kl_value = kl_count > 0 ? kl_value / static_cast<double>(kl_count) : 0.0;
        }

        result.final_mean_reward = group.mean_reward;
        if (metrics) {
            UpdateMetrics rec;
            rec.update = update;
            rec.mean_reward = group.mean_reward;
            rec.loss = loss_value;
            rec.kl = kl_value;
            rec.mean_entropy = group.mean_entropy;
            rec.selected_step_histogram = group.selected_step_histogram;
            rec.counters = counters;
            rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            rec.seed = config.seed;
            metrics(rec);
        }
        if (checkpoint) checkpoint(update, result.model);
    }
    result.counters = counters;
    return result;
}

ConsistencyReport gradient_consistency_check(const DenoiserModel& model, const TaskQuery& query,
                                             int response_len, const RewardFn& reward,
                                             const UnmaskSchedule& unmask, double temperature,
                                             const EnumLimits& limits) {
    ConsistencyReport report;
    report.policy_gradient = exact_gradient(model, query, response_len, reward, unmask, temperature, limits);

    // Enumerated expectation of -grad L at theta = theta_old: for each
    // trajectory, each step contributes A_t * d rho_t evaluated at rho = 1,
    // i.e. A_t * grad log pi. Advantages use exact values of the
    // pre-transition state; no clipping, no KL.
    const MaskedSequence start = initial_state(query.prompt, response_len, model.arch().vocab_size);
    const EnumeratedDistribution dist = enumerate_completions(model, start, unmask, temperature, limits);
    ValueOracle values(model, query, reward, unmask, temperature, limits);
    const std::size_t P = static_cast<std::size_t>(model.arch().param_count());
    report.loss_gradient.assign(P, 0.0);
    const std::vector<std::vector<int>> plan = plan_unmask_sequence(start, unmask, 0);

    for (const EnumeratedOutcome& out : dist.outcomes) {
        const double r = reward(out.states.back(), query);
        for (std::size_t k = 0; k < plan.size(); ++k) {
            const MaskedSequence& before = out.states[k];
            const MaskedSequence& after = out.states[k + 1];
            std::vector<Token> chosen;
            chosen.reserve(plan[k].size());
            for (int pos : plan[k]) chosen.push_back(after.tokens[static_cast<std::size_t>(pos)]);
            const double advantage = r - values.value(before);
            // -dL/dtheta with rho = pi_theta/pi_old at theta_old: the ratio
            // derivative is grad log pi times rho = 1.
            const GradVec g = model.grad_log_prob(before, plan[k], chosen, temperature);
            for (std::size_t p = 0; p < P; ++p)
                report.loss_gradient[p] += out.probability * advantage * g[p];
        }
    }

    double num = 0.0, den = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
        const double d = report.loss_gradient[p] - report.policy_gradient[p];
        num += d * d;
        den += report.policy_gradient[p] * report.policy_gradient[p];
    }
    report.relative_error = std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
    return report;
}

} // namespace egspo

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "egspo/pg.hpp"
#include "egspo/schedule.hpp"
#include "egspo/step_select.hpp"
#include "egspo/tasks.hpp"

namespace egspo {

struct LambdaSchedule {
    enum class Mode { constant, halving };
    Mode mode = Mode::constant;
    double initial = 0.0;
    int half_every = 500; // training steps between halvings

    double value(int update) const {
        if (mode == Mode::constant) return initial;
        double v = initial;
        for (int u = half_every; u <= update; u += half_every) v *= 0.5;
        return v;
    }
};

enum class OptimizerKind { sgd, adam };

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.1;
    double eps = 1e-8;
};

enum class Strategy { egspo, egspo_sa, uspo, rspo, full };

Strategy strategy_from_string(const std::string& s);
std::string strategy_to_string(Strategy s);

enum class EntropyAggregation { sum, mean };
enum class CenterMode { per_rank, pooled };

struct TrainConfig {
    int total_steps = 8;     // T
    int response_len = 8;    // L
    int vocab_size = 8;      // |V|
    int group_size = 8;      // G
    int step_budget = 4;     // K
    double clip_eps = 0.2;   // epsilon; infinity disables clipping
    double kl_beta = 0.0;    // beta
    LambdaSchedule lambda_schedule{};
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    AdamParams adam{};
    double temperature = 1.0;
    std::uint64_t seed = 1;
    int inner_epochs = 1;
    int updates = 1000;
    Strategy strategy = Strategy::egspo_sa;
    UnmaskSchedule unmask{};
    EntropyAggregation entropy_aggregation = EntropyAggregation::sum;
    CenterMode center_mode = CenterMode::per_rank;
    int threads = 1; // parallel rollouts across the group

    void validate() const;
};

/// Monotone compute meters. The flops proxy is forward_passes times the
/// fixed per-pass multiply-add count of the architecture.
struct ComputeCounters {
    std::uint64_t forward_passes = 0;
    std::uint64_t flops_proxy = 0;
    std::uint64_t samples = 0;        // cumulative prompt-completion pairs
    std::uint64_t gradient_steps = 0; // optimizer updates

    void add_forward_passes(std::uint64_t n, std::uint64_t per_pass_macs) {
        forward_passes += n;
        flops_proxy += n * per_pass_macs;
    }
};

struct SelectedStep {
    int t = 0;               // diffusion index
    std::size_t step_index = 0; // index into Trajectory::steps
    double lambda = 0.0;
    double baseline_reward = 0.0;
    double advantage_raw = 0.0; // before group centering
    double advantage = 0.0;     // centered
    double ref_log_prob = 0.0;
};

struct GroupMember {
    Trajectory trajectory;
    double reward = 0.0;
    std::vector<SelectedStep> selected; // ordered by descending t
};

struct GroupRollout {
    TaskQuery query;
    std::vector<GroupMember> members;
    std::vector<int> selected_step_histogram; // counts per diffusion step
    double mean_reward = 0.0;
    double mean_entropy = 0.0; // over nonempty steps of all members
};

/// One Algorithm-1 collection phase: G rollouts under the frozen sampling
/// model, reference log-probs on the same transitions, per-trajectory
/// entropy bookkeeping, step selection, stepwise advantages from cached
/// greedy completions, and group centering.
GroupRollout collect_group(const DenoiserModel& model_old, const DenoiserModel& model_ref,
                           const TaskQuery& query, const RewardFn& reward, const TrainConfig& config,
                           int update_index, std::uint64_t rollout_seed, ComputeCounters& counters);

/// Per-step clipped surrogate with KL regularization:
/// -min(rho*A, clip(rho, 1-eps, 1+eps)*A) + beta*kl_term.
double grpo_step_loss(double ratio, double advantage, double clip_eps, double kl_term, double kl_beta);

/// k3 estimator of KL(pi_theta || pi_ref) on a realized transition:
/// exp(d) - d - 1 with d = logp_ref - logp_theta. Always >= 0.
double kl_estimate(double logp_theta, double logp_ref);

struct UpdateMetrics {
    int update = 0;
    double mean_reward = 0.0;
    double loss = 0.0;
    double kl = 0.0;
    double mean_entropy = 0.0;
    std::vector<int> selected_step_histogram;
    ComputeCounters counters;
    double wall_ms = 0.0;
    std::uint64_t seed = 0;
};

using MetricsSink = std::function<void(const UpdateMetrics&)>;

struct TrainResult {
    DenoiserModel model;
    ComputeCounters counters;
    double final_mean_reward = 0.0; // group mean of the last update
};

/// Checkpoint hook: called after each update with the current model.
using CheckpointHook = std::function<void(int update, const DenoiserModel&)>;

TrainResult train(DenoiserModel model, const RewardTask& task, const TrainConfig& config,
                  const MetricsSink& metrics = nullptr, const CheckpointHook& checkpoint = nullptr);

/// Enumerated expectation of -grad L at theta = theta_old with no clipping,
/// no KL, every step selected and exact value baselines; compared against
/// the enumerated policy gradient.
struct ConsistencyReport {
    GradVec loss_gradient;  // -grad L, via the surrogate-ratio path
    GradVec policy_gradient;
    double relative_error = 0.0;
};

ConsistencyReport gradient_consistency_check(const DenoiserModel& model, const TaskQuery& query,
                                             int response_len, const RewardFn& reward,
                                             const UnmaskSchedule& unmask, double temperature,
                                             const EnumLimits& limits = {});

} // namespace egspo

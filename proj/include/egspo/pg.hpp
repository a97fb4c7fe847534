#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "egspo/denoiser.hpp"
#include "egspo/diffusion.hpp"
#include "egspo/vocab.hpp"

namespace egspo {

using RewardFn = std::function<double(const MaskedSequence& x0, const TaskQuery& q)>;

struct EnumerationCapExceeded : std::runtime_error {
    explicit EnumerationCapExceeded(const std::string& what) : std::runtime_error(what) {}
};

struct EnumLimits {
    std::uint64_t max_outcomes = 1'000'000;
};

/// All completions reachable from a start state under a theta-independent
/// unmask schedule, with their path probabilities. Outcomes are ordered
/// lexicographically by (step, position, token).
struct EnumeratedOutcome {
    std::vector<MaskedSequence> states; // start .. x_0
    double probability = 0.0;
    double log_prob = 0.0;
};

struct EnumeratedDistribution {
    std::vector<EnumeratedOutcome> outcomes;
    double total_prob = 0.0;
};

EnumeratedDistribution enumerate_completions(const DenoiserModel& model, const MaskedSequence& x_start,
                                             const UnmaskSchedule& unmask, double temperature,
                                             const EnumLimits& limits = {});

/// V_t(x_t, q): exact expected terminal reward over every completion of x_t.
double exact_value(const DenoiserModel& model, const MaskedSequence& x_t, const TaskQuery& query,
                   const RewardFn& reward, const UnmaskSchedule& unmask, double temperature,
                   const EnumLimits& limits = {});

/// J(theta) for the given query: exact_value of the all-mask start state.
double exact_objective(const DenoiserModel& model, const TaskQuery& query, int response_len,
                       const RewardFn& reward, const UnmaskSchedule& unmask, double temperature,
                       const EnumLimits& limits = {});

/// Exact policy gradient in the terminal-reward (REINFORCE) form:
/// sum_x pi(x) r(x0) grad log pi(x).
GradVec exact_gradient(const DenoiserModel& model, const TaskQuery& query, int response_len,
                       const RewardFn& reward, const UnmaskSchedule& unmask, double temperature,
                       const EnumLimits& limits = {});

/// Exact policy gradient in the stepwise-advantage form with an arbitrary
/// action-independent per-state baseline (nullptr => exact values V_{t+1}).
using BaselineFn = std::function<double(const MaskedSequence& x_before)>;
GradVec exact_gradient_advantage(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                 const RewardFn& reward, const UnmaskSchedule& unmask, double temperature,
                                 const BaselineFn& baseline = nullptr, const EnumLimits& limits = {});

/// Per-step exact gradients grad J_t, indexed by plan step (t = T-1 first).
std::vector<GradVec> exact_step_gradients(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                          const RewardFn& reward, const UnmaskSchedule& unmask,
                                          double temperature, const EnumLimits& limits = {});

/// Probability-weighted step entropies E[H_t], same indexing as
/// exact_step_gradients.
std::vector<double> expected_step_entropies(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                            const UnmaskSchedule& unmask, double temperature,
                                            const EnumLimits& limits = {});

/// max over reverse steps and reachable intermediate states of
/// grad_norm_bound; the trajectory-level B of the entropy error bound.
double max_grad_norm_bound(const DenoiserModel& model, const TaskQuery& query, int response_len,
                           const UnmaskSchedule& unmask, double temperature, const EnumLimits& limits = {});

/// Memoizing wrapper around exact_value, keyed by state tokens.
class ValueOracle {
public:
    ValueOracle(const DenoiserModel& model, TaskQuery query, RewardFn reward, UnmaskSchedule unmask,
                double temperature, EnumLimits limits = {})
        : model_(model), query_(std::move(query)), reward_(std::move(reward)), unmask_(unmask),
          temperature_(temperature), limits_(limits) {}

    double value(const MaskedSequence& x_t);

private:
    const DenoiserModel& model_;
    TaskQuery query_;
    RewardFn reward_;
    UnmaskSchedule unmask_;
    double temperature_;
    EnumLimits limits_;
    std::unordered_map<std::string, double> cache_;
};

enum class BaselineMode { exact_value, one_step_greedy, zero };

struct McOptions {
    int n_samples = 1;
    BaselineMode baseline = BaselineMode::zero;
    std::uint64_t seed = 0;
    int total_steps = 1;
    double temperature = 1.0;
    EnumLimits limits{};
};

struct McGradientStats {
    GradVec mean;
    GradVec sample_variance; // per-sample variance, componentwise
    std::uint64_t n = 0;

    std::vector<double> standard_errors() const;
};

/// Monte-Carlo REINFORCE estimator: mean over rollouts of
/// sum_t r(x0) grad log pi(x_t | x_{t+1}).
McGradientStats mc_gradient_reinforce(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                      const RewardFn& reward, const UnmaskSchedule& unmask, const McOptions& opt);

/// Stepwise-advantage estimator: A_t = r(x0) - baseline(x_{t+1}) per step.
/// With BaselineMode::zero this reproduces mc_gradient_reinforce bitwise on
/// matched seeds.
McGradientStats mc_gradient_stepwise(const DenoiserModel& model, const TaskQuery& query, int response_len,
                                     const RewardFn& reward, const UnmaskSchedule& unmask, const McOptions& opt);

enum class OneStepMode { enumerate, greedy };

/// One-step value estimate V^hat_t: expected reward under the single-pass
/// product distribution over the remaining masked tokens (enumerate), or the
/// reward of the greedy completion (greedy).
double one_step_value(const DenoiserModel& model, const MaskedSequence& x_t, const TaskQuery& query,
                      const RewardFn& reward, OneStepMode mode, double temperature = 1.0,
                      const EnumLimits& limits = {});

/// Fill every masked position with its argmax token (ties -> lowest id).
MaskedSequence greedy_complete(const DenoiserModel& model, const MaskedSequence& x_t,
                               std::uint64_t* forward_passes = nullptr);

/// (1 + lambda) * reward - lambda * baseline, lambda in [0, 1].
double stepwise_advantage(double reward, double baseline, double lambda_t);

} // namespace egspo

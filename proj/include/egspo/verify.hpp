#pragma once

#include <string>
#include <vector>

#include "egspo/pg.hpp"
#include "egspo/step_select.hpp"
#include "egspo/trainer.hpp"

namespace egspo {

struct CheckResult {
    std::string name;
    bool pass = false;
    double measured_error = 0.0;
    double tolerance = 0.0;
    double wall_ms = 0.0;
};

struct VerificationSuiteResult {
    std::vector<CheckResult> checks;
    bool all_pass() const {
        for (const CheckResult& c : checks)
            if (!c.pass) return false;
        return true;
    }
};

/// Small random instances used by every oracle suite: a tiny model plus a
/// seeded bounded reward over clean sequences.
struct TinyInstance {
    DenoiserModel model;
    TaskQuery query;
    int response_len;
    UnmaskSchedule unmask;
    double temperature;
    RewardFn reward;
};

TinyInstance make_tiny_instance(std::uint64_t seed, int response_len = 3, int vocab_size = 2,
                                int tokens_per_step = 1, UnmaskMode mode = UnmaskMode::fixed_order);

// Individual suites; counts and tolerances are fixed here.
VerificationSuiteResult verify_theorem1(int instances = 20);
VerificationSuiteResult verify_lemma1(int instances = 100);
VerificationSuiteResult verify_prop1_suite(int instances = 100);
VerificationSuiteResult verify_estimators(int n_samples = 100'000);
VerificationSuiteResult verify_greedy_subset(int vectors = 50);
VerificationSuiteResult verify_grpo_consistency(int instances = 5);
VerificationSuiteResult verify_gradients(int probes = 50);

/// scope in {all, theorem1, lemma1, prop1, estimators, greedy_subset,
/// grpo_consistency}; throws on anything else.
VerificationSuiteResult run_verification(const std::string& scope);

} // namespace egspo

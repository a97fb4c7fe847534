#pragma once

#include <iosfwd>
#include <string>

#include "egspo/config.hpp"
#include "egspo/verify.hpp"

namespace egspo {

// CLI exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailure = 1;
inline constexpr int kExitUsageOrIo = 2;

/// Atomic file write: temp file in the same directory, then rename.
void write_file_atomic(const std::string& path, const std::string& contents);

struct TrainArtifacts {
    std::string metrics_path;
    std::string summary_path;
    std::string final_checkpoint_path;
    double final_mean_reward = 0.0;
};

/// Runs one experiment: metrics JSON-lines, periodic + final checkpoints
/// (written atomically), optional periodic greedy evals, and a summary
/// record. Throws on config/IO/divergence problems.
TrainArtifacts run_train(const ExperimentConfig& cfg);

/// Matched-seed comparison of entropy / uniform / random step selection at
/// the configured K: per-strategy metrics files plus per-update selected-step
/// histogram files (one row of T counts per update).
void run_ablate_steps(const ExperimentConfig& cfg);

struct EvalSummary {
    double mean_reward = 0.0;
    int n_queries = 0;
    std::string records_path;
};

/// Greedy decoding of a checkpointed model over task queries.
EvalSummary run_eval(const std::string& checkpoint_path, const ExperimentConfig& cfg, int n_queries,
                     std::uint64_t seed, const std::string& out_dir);

/// Prints a pass/fail table; returns true iff every check passed.
bool print_verification(const VerificationSuiteResult& result, std::ostream& out);

/// Full command-line entry point (exposed for in-process testing).
int run_cli(int argc, const char* const* argv);

} // namespace egspo

#include "egspo/harness.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "egspo/metrics.hpp"
#include "egspo/tasks.hpp"

namespace egspo {

namespace fs = std::filesystem;

void write_file_atomic(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp);
        out << contents;
        if (!out) throw std::runtime_error("write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

namespace {

void save_checkpoint_atomic(const DenoiserModel& model, const std::string& path) {
    const std::string tmp = path + ".tmp";
    model.save_checkpoint(tmp);
    fs::rename(tmp, path);
}

RewardTask build_task(const ExperimentConfig& cfg) {
    return make_task(cfg.task_name, cfg.train.response_len, cfg.train.vocab_size, cfg.task_seed,
                     cfg.query_len, cfg.num_queries);
}

DenoiserModel build_model(const ExperimentConfig& cfg, const RewardTask& task) {
    ModelArch arch;
    arch.embed_dim = cfg.embed_dim;
    arch.hidden_dim = cfg.hidden_dim;
    arch.seq_len = task.seq_len();
    arch.vocab_size = task.vocab_size;
    return DenoiserModel(arch, cfg.init_seed, cfg.init_scale);
}

double greedy_eval_mean_reward(const DenoiserModel& model, const RewardTask& task, const TrainConfig& tc,
                               int n_queries, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    RolloutOptions opts;
    opts.temperature = tc.temperature;
    opts.greedy = true;
    double total = 0.0;
    for (int i = 0; i < n_queries; ++i) {
        const TaskQuery q = task.sample_query(rng);
        const Trajectory traj = rollout(model, q.prompt, tc.response_len, tc.total_steps, tc.unmask, rng, opts);
        total += task.reward(traj.final_state(), q);
    }
    return total / static_cast<double>(n_queries);
}

} // namespace

TrainArtifacts run_train(const ExperimentConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    const RewardTask task = build_task(cfg);
    DenoiserModel model = build_model(cfg, task);

    TrainArtifacts artifacts;
    artifacts.metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    artifacts.summary_path = (fs::path(cfg.out_dir) / "summary.json").string();
    artifacts.final_checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint_final.ckpt").string();

    JsonlMetricsWriter metrics(artifacts.metrics_path);
    std::ofstream eval_out;
    if (cfg.eval_interval > 0) {
        eval_out.open((fs::path(cfg.out_dir) / "eval.jsonl").string(), std::ios::trunc);
        if (!eval_out) throw std::runtime_error("cannot open eval.jsonl");
    }

    CheckpointHook hook = [&](int update, const DenoiserModel& m) {
        if (cfg.checkpoint_interval > 0 && (update + 1) % cfg.checkpoint_interval == 0) {
            const std::string path =
                (fs::path(cfg.out_dir) / ("checkpoint_" + std::to_string(update + 1) + ".ckpt")).string();
            save_checkpoint_atomic(m, path);
        }
        if (cfg.eval_interval > 0 && (update + 1) % cfg.eval_interval == 0) {
            const double r = greedy_eval_mean_reward(
                m, task, cfg.train, cfg.eval_queries,
                derive_seed(cfg.train.seed, 0xe7a1ULL + static_cast<std::uint64_t>(update)));
            nlohmann::ordered_json j;
            j["update"] = update;
            j["eval_mean_reward"] = r;
            j["n_queries"] = cfg.eval_queries;
            eval_out << j.dump() << '\n';
        }
    };

    TrainResult result = train(std::move(model), task, cfg.train, metrics.sink(), hook);
    metrics.flush();
    save_checkpoint_atomic(result.model, artifacts.final_checkpoint_path);
    artifacts.final_mean_reward = result.final_mean_reward;

    nlohmann::ordered_json summary;
    summary["task"] = cfg.task_name;
    summary["strategy"] = strategy_to_string(cfg.train.strategy);
    summary["updates"] = cfg.train.updates;
    summary["seed"] = cfg.train.seed;
    summary["final_mean_reward"] = result.final_mean_reward;
    summary["forward_passes"] = result.counters.forward_passes;
    summary["flops_proxy"] = result.counters.flops_proxy;
    summary["samples"] = result.counters.samples;
    summary["gradient_steps"] = result.counters.gradient_steps;
    summary["checkpoint"] = artifacts.final_checkpoint_path;
    write_file_atomic(artifacts.summary_path, summary.dump(2) + "\n");
    return artifacts;
}

void run_ablate_steps(const ExperimentConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    const RewardTask task = build_task(cfg);

    const Strategy strategies[] = {Strategy::egspo, Strategy::uspo, Strategy::rspo};
    for (Strategy strategy : strategies) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.train.strategy = strategy;
        run_cfg.train.lambda_schedule = LambdaSchedule{LambdaSchedule::Mode::constant, 0.0, 500};
        const std::string tag = strategy_to_string(strategy);

        DenoiserModel model = build_model(run_cfg, task);
        JsonlMetricsWriter metrics((fs::path(cfg.out_dir) / ("metrics_" + tag + ".jsonl")).string());
        std::ofstream hist((fs::path(cfg.out_dir) / ("hist_" + tag + ".txt")).string(), std::ios::trunc);
        if (!hist) throw std::runtime_error("cannot open histogram file");

        MetricsSink sink = [&](const UpdateMetrics& rec) {
            metrics.write(rec);
            for (std::size_t i = 0; i < rec.selected_step_histogram.size(); ++i) {
                if (i) hist << ' ';
                hist << rec.selected_step_histogram[i];
            }
            hist << '\n';
        };
        train(std::move(model), task, run_cfg.train, sink, nullptr);
    }
}

EvalSummary run_eval(const std::string& checkpoint_path, const ExperimentConfig& cfg, int n_queries,
                     std::uint64_t seed, const std::string& out_dir) {
    if (n_queries < 1) throw std::invalid_argument("eval: n_queries must be >= 1");
    const RewardTask task = build_task(cfg);
    const DenoiserModel model = DenoiserModel::load_checkpoint(checkpoint_path);
    if (model.arch().seq_len != task.seq_len() || model.arch().vocab_size != task.vocab_size)
        throw std::invalid_argument("eval: checkpoint arch does not match task");

    fs::create_directories(out_dir);
    EvalSummary summary;
    summary.n_queries = n_queries;
    summary.records_path = (fs::path(out_dir) / "eval_records.jsonl").string();
    std::ofstream records(summary.records_path, std::ios::trunc);
    if (!records) throw std::runtime_error("cannot open " + summary.records_path);

    Rng rng = make_rng(seed);
    RolloutOptions opts;
    opts.temperature = cfg.train.temperature;
    opts.greedy = true;
    double total = 0.0;
    for (int i = 0; i < n_queries; ++i) {
        const TaskQuery q = task.sample_query(rng);
        const Trajectory traj =
            rollout(model, q.prompt, cfg.train.response_len, cfg.train.total_steps, cfg.train.unmask, rng, opts);
        const double r = task.reward(traj.final_state(), q);
        total += r;
        nlohmann::ordered_json j;
        j["query_index"] = i;
        j["reward"] = r;
        records << j.dump() << '\n';
    }
    summary.mean_reward = total / static_cast<double>(n_queries);
    return summary;
}

bool print_verification(const VerificationSuiteResult& result, std::ostream& out) {
    std::size_t width = 12;
    for (const CheckResult& c : result.checks) width = std::max(width, c.name.size());
    for (const CheckResult& c : result.checks) {
        out << (c.pass ? "PASS  " : "FAIL  ") << std::left << std::setw(static_cast<int>(width + 2)) << c.name
            << " measured=" << std::scientific << std::setprecision(3) << c.measured_error
            << " tolerance=" << c.tolerance << std::defaultfloat << " wall_ms=" << std::fixed
            << std::setprecision(1) << c.wall_ms << std::defaultfloat << '\n';
    }
    out << (result.all_pass() ? "ALL CHECKS PASSED" : "CHECK FAILURES PRESENT") << " ("
        << result.checks.size() << " checks)\n";
    return result.all_pass();
}

namespace {

void print_error_record(const std::string& kind, const std::string& detail) {
    nlohmann::ordered_json j;
    j["error"] = kind;
    j["detail"] = detail;
    std::cerr << j.dump() << std::endl;
}

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override,
                             const std::string& out_override) {
    ExperimentConfig cfg = ExperimentConfig::from_ini(IniFile::load(path));
    if (seed_override) cfg.train.seed = *seed_override;
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (const char* threads = std::getenv("EGSPO_THREADS")) cfg.train.threads = std::atoi(threads);
    cfg.validate();
    return cfg;
}

} // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Stepwise policy optimization for masked diffusion sequence models"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;

    auto add_common = [&](CLI::App* cmd, bool config_required) {
        auto* c = cmd->add_option("--config", config_path, "experiment config file (INI)");
        if (config_required) c->required();
        cmd->add_option("--seed", seed, "override the training seed");
        cmd->add_option("--out", out_dir, "override the output directory");
    };

    CLI::App* cmd_train = app.add_subcommand("train", "run one training experiment");
    add_common(cmd_train, true);

    CLI::App* cmd_verify = app.add_subcommand("verify", "run the oracle verification suites");
    std::string scope = "all";
    cmd_verify->add_option("scope", scope,
                           "all | theorem1 | lemma1 | prop1 | estimators | greedy_subset | grpo_consistency");
    add_common(cmd_verify, false);

    CLI::App* cmd_ablate = app.add_subcommand("ablate-steps", "compare step-selection strategies");
    add_common(cmd_ablate, true);

    CLI::App* cmd_eval = app.add_subcommand("eval", "greedy-decode a checkpoint on task queries");
    std::string checkpoint_path;
    int n_queries = 100;
    cmd_eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    cmd_eval->add_option("--n-queries", n_queries, "number of evaluation queries");
    add_common(cmd_eval, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        print_error_record("usage", e.what());
        app.exit(e, std::cout, std::cerr);
        return kExitUsageOrIo;
    }

    try {
        if (app.got_subcommand(cmd_train)) {
            const ExperimentConfig cfg = load_config(config_path, seed, out_dir);
            const TrainArtifacts artifacts = run_train(cfg);
            std::cout << "final_mean_reward=" << artifacts.final_mean_reward << " metrics="
                      << artifacts.metrics_path << " checkpoint=" << artifacts.final_checkpoint_path << '\n';
            return kExitOk;
        }
        if (app.got_subcommand(cmd_verify)) {
            const VerificationSuiteResult result = run_verification(scope);
            return print_verification(result, std::cout) ? kExitOk : kExitCheckFailure;
        }
        if (app.got_subcommand(cmd_ablate)) {
            const ExperimentConfig cfg = load_config(config_path, seed, out_dir);
            run_ablate_steps(cfg);
            std::cout << "ablation outputs in " << cfg.out_dir << '\n';
            return kExitOk;
        }
        if (app.got_subcommand(cmd_eval)) {
            ExperimentConfig cfg = load_config(config_path, seed, out_dir);
            const EvalSummary summary = run_eval(checkpoint_path, cfg, n_queries,
                                                 seed.value_or(cfg.train.seed), cfg.out_dir);
            nlohmann::ordered_json j;
            j["mean_reward"] = summary.mean_reward;
            j["n_queries"] = summary.n_queries;
            j["records"] = summary.records_path;
            std::cout << j.dump() << '\n';
            return kExitOk;
        }
    } catch (const std::invalid_argument& e) {
        print_error_record("invalid-config", e.what());
        return kExitUsageOrIo;
    } catch (const std::exception& e) {
        print_error_record("runtime", e.what());
        return kExitUsageOrIo;
    }
    print_error_record("usage", "no subcommand");
    return kExitUsageOrIo;
}

} // namespace egspo

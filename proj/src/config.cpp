#include "egspo/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace egspo {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

} // namespace

IniFile IniFile::parse(const std::string& text) {
    IniFile ini;
    std::istringstream in(text);
    std::string line;
    std::string current = "";
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw std::invalid_argument("config line " + std::to_string(line_no) + ": unterminated section");
            current = trim(t.substr(1, t.size() - 2));
            ini.find_or_add(current);
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
        ini.set(current, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return ini;
}

IniFile IniFile::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string IniFile::serialize() const {
    std::ostringstream out;
    bool first = true;
    for (const Section& s : sections_) {
        if (!first) out << '\n';
        first = false;
        out << '[' << s.name << "]\n";
        for (const auto& [k, v] : s.entries) out << k << " = " << v << '\n';
    }
    return out.str();
}

const IniFile::Section* IniFile::find(const std::string& name) const {
    for (const Section& s : sections_)
        if (s.name == name) return &s;
    return nullptr;
}

IniFile::Section& IniFile::find_or_add(const std::string& name) {
    for (Section& s : sections_)
        if (s.name == name) return s;
    sections_.push_back(Section{name, {}});
    return sections_.back();
}

bool IniFile::has(const std::string& section, const std::string& key) const {
    const Section* s = find(section);
    if (!s) return false;
    for (const auto& [k, v] : s->entries)
        if (k == key) return true;
    return false;
}

std::string IniFile::get(const std::string& section, const std::string& key) const {
    const Section* s = find(section);
    if (s)
        for (const auto& [k, v] : s->entries)
            if (k == key) return v;
    throw std::out_of_range("config: missing key [" + section + "] " + key);
}

std::string IniFile::get_or(const std::string& section, const std::string& key,
                            const std::string& fallback) const {
    return has(section, key) ? get(section, key) : fallback;
}

void IniFile::set(const std::string& section, const std::string& key, const std::string& value) {
    Section& s = find_or_add(section);
    for (auto& [k, v] : s.entries) {
        if (k == key) {
            v = value;
            return;
        }
    }
    s.entries.emplace_back(key, value);
}

double IniFile::get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key);
    if (v == "inf" || v == "infinity") return std::numeric_limits<double>::infinity();
    return std::stod(v);
}

int IniFile::get_int(const std::string& section, const std::string& key, int fallback) const {
    return has(section, key) ? std::stoi(get(section, key)) : fallback;
}

std::uint64_t IniFile::get_u64(const std::string& section, const std::string& key, std::uint64_t fallback) const {
    return has(section, key) ? std::stoull(get(section, key)) : fallback;
}

namespace {

UnmaskMode unmask_mode_from_string(const std::string& s) {
    if (s == "fixed_order") return UnmaskMode::fixed_order;
    if (s == "seeded_random") return UnmaskMode::seeded_random;
    if (s == "confidence") return UnmaskMode::confidence;
    throw std::invalid_argument("unknown unmask mode '" + s + "'");
}

std::string unmask_mode_to_string(UnmaskMode m) {
    switch (m) {
    case UnmaskMode::fixed_order: return "fixed_order";
    case UnmaskMode::seeded_random: return "seeded_random";
    case UnmaskMode::confidence: return "confidence";
    }
    return "?";
}

std::string format_double(double v) {
    if (std::isinf(v)) return "inf";
    std::ostringstream ss;
    ss << v;
    return ss.str();
}

} // namespace

ExperimentConfig ExperimentConfig::from_ini(const IniFile& ini) {
    ExperimentConfig cfg;
    cfg.task_name = ini.get_or("task", "name", cfg.task_name);
    cfg.query_len = ini.get_int("task", "query_len", cfg.query_len);
    cfg.num_queries = ini.get_int("task", "num_queries", cfg.num_queries);
    cfg.task_seed = ini.get_u64("task", "seed", cfg.task_seed);
    cfg.train.response_len = ini.get_int("task", "response_len", cfg.train.response_len);
    cfg.train.vocab_size = ini.get_int("task", "vocab_size", cfg.train.vocab_size);

    cfg.embed_dim = ini.get_int("model", "embed_dim", cfg.embed_dim);
    cfg.hidden_dim = ini.get_int("model", "hidden_dim", cfg.hidden_dim);
    cfg.init_scale = ini.get_double("model", "init_scale", cfg.init_scale);
    cfg.init_seed = ini.get_u64("model", "init_seed", cfg.init_seed);

    TrainConfig& t = cfg.train;
    t.total_steps = ini.get_int("train", "T", t.total_steps);
    t.group_size = ini.get_int("train", "G", t.group_size);
    t.step_budget = ini.get_int("train", "K", t.step_budget);
    t.clip_eps = ini.get_double("train", "clip_eps", t.clip_eps);
    t.kl_beta = ini.get_double("train", "kl_beta", t.kl_beta);
    t.learning_rate = ini.get_double("train", "learning_rate", t.learning_rate);
    t.temperature = ini.get_double("train", "temperature", t.temperature);
    t.seed = ini.get_u64("train", "seed", t.seed);
    t.inner_epochs = ini.get_int("train", "inner_epochs", t.inner_epochs);
    t.updates = ini.get_int("train", "updates", t.updates);
    t.threads = ini.get_int("train", "threads", t.threads);

    const std::string opt = ini.get_or("train", "optimizer", "adam");
    if (opt == "adam")
        t.optimizer = OptimizerKind::adam;
    else if (opt == "sgd")
        t.optimizer = OptimizerKind::sgd;
    else
        throw std::invalid_argument("unknown optimizer '" + opt + "'");
    t.adam.beta1 = ini.get_double("train", "adam_beta1", t.adam.beta1);
    t.adam.beta2 = ini.get_double("train", "adam_beta2", t.adam.beta2);
    t.adam.weight_decay = ini.get_double("train", "weight_decay", t.adam.weight_decay);

    const std::string lmode = ini.get_or("train", "lambda_mode", "constant");
    if (lmode == "constant")
        t.lambda_schedule.mode = LambdaSchedule::Mode::constant;
    else if (lmode == "halving")
        t.lambda_schedule.mode = LambdaSchedule::Mode::halving;
    else
        throw std::invalid_argument("unknown lambda_mode '" + lmode + "'");
    t.lambda_schedule.initial = ini.get_double("train", "lambda", t.lambda_schedule.initial);
    t.lambda_schedule.half_every = ini.get_int("train", "lambda_half_every", t.lambda_schedule.half_every);

    t.unmask.mode = unmask_mode_from_string(ini.get_or("unmask", "mode", "fixed_order"));
    t.unmask.tokens_per_step = ini.get_int("unmask", "tokens_per_step", t.unmask.tokens_per_step);
    t.unmask.block_size = ini.get_int("unmask", "block_size", t.unmask.block_size);
    t.unmask.seed = ini.get_u64("unmask", "seed", t.unmask.seed);

    const std::string agg = ini.get_or("train", "entropy_aggregation", "sum");
    if (agg == "sum")
        t.entropy_aggregation = EntropyAggregation::sum;
    else if (agg == "mean")
        t.entropy_aggregation = EntropyAggregation::mean;
    else
        throw std::invalid_argument("unknown entropy_aggregation '" + agg + "'");
    const std::string center = ini.get_or("train", "center_mode", "per_rank");
    if (center == "per_rank")
        t.center_mode = CenterMode::per_rank;
    else if (center == "pooled")
        t.center_mode = CenterMode::pooled;
    else
        throw std::invalid_argument("unknown center_mode '" + center + "'");

    t.strategy = strategy_from_string(ini.get_or("experiment", "strategy", "egspo_sa"));
    cfg.out_dir = ini.get_or("experiment", "out_dir", cfg.out_dir);
    cfg.checkpoint_interval = ini.get_int("experiment", "checkpoint_interval", cfg.checkpoint_interval);
    cfg.eval_interval = ini.get_int("experiment", "eval_interval", cfg.eval_interval);
    cfg.eval_queries = ini.get_int("experiment", "eval_queries", cfg.eval_queries);

    cfg.validate();
    return cfg;
}

IniFile ExperimentConfig::to_ini() const {
    IniFile ini;
    ini.set("task", "name", task_name);
    ini.set("task", "query_len", std::to_string(query_len));
    ini.set("task", "num_queries", std::to_string(num_queries));
    ini.set("task", "seed", std::to_string(task_seed));
    ini.set("task", "response_len", std::to_string(train.response_len));
    ini.set("task", "vocab_size", std::to_string(train.vocab_size));

    ini.set("model", "embed_dim", std::to_string(embed_dim));
    ini.set("model", "hidden_dim", std::to_string(hidden_dim));
    ini.set("model", "init_scale", format_double(init_scale));
    ini.set("model", "init_seed", std::to_string(init_seed));

    ini.set("train", "T", std::to_string(train.total_steps));
    ini.set("train", "G", std::to_string(train.group_size));
    ini.set("train", "K", std::to_string(train.step_budget));
    ini.set("train", "clip_eps", format_double(train.clip_eps));
    ini.set("train", "kl_beta", format_double(train.kl_beta));
    ini.set("train", "learning_rate", format_double(train.learning_rate));
    ini.set("train", "temperature", format_double(train.temperature));
    ini.set("train", "seed", std::to_string(train.seed));
    ini.set("train", "inner_epochs", std::to_string(train.inner_epochs));
    ini.set("train", "updates", std::to_string(train.updates));
    ini.set("train", "threads", std::to_string(train.threads));
    ini.set("train", "optimizer", train.optimizer == OptimizerKind::adam ? "adam" : "sgd");
    ini.set("train", "adam_beta1", format_double(train.adam.beta1));
    ini.set("train", "adam_beta2", format_double(train.adam.beta2));
    ini.set("train", "weight_decay", format_double(train.adam.weight_decay));
    ini.set("train", "lambda_mode",
            train.lambda_schedule.mode == LambdaSchedule::Mode::constant ? "constant" : "halving");
    ini.set("train", "lambda", format_double(train.lambda_schedule.initial));
    ini.set("train", "lambda_half_every", std::to_string(train.lambda_schedule.half_every));
    ini.set("train", "entropy_aggregation",
            train.entropy_aggregation == EntropyAggregation::sum ? "sum" : "mean");
    ini.set("train", "center_mode", train.center_mode == CenterMode::per_rank ? "per_rank" : "pooled");

    ini.set("unmask", "mode", unmask_mode_to_string(train.unmask.mode));
    ini.set("unmask", "tokens_per_step", std::to_string(train.unmask.tokens_per_step));
    ini.set("unmask", "block_size", std::to_string(train.unmask.block_size));
    ini.set("unmask", "seed", std::to_string(train.unmask.seed));

    ini.set("experiment", "strategy", strategy_to_string(train.strategy));
    ini.set("experiment", "out_dir", out_dir);
    ini.set("experiment", "checkpoint_interval", std::to_string(checkpoint_interval));
    ini.set("experiment", "eval_interval", std::to_string(eval_interval));
    ini.set("experiment", "eval_queries", std::to_string(eval_queries));
    return ini;
}

void ExperimentConfig::validate() const {
    train.validate();
    if (task_name == "sudoku") {
        if (train.response_len != 16 || train.vocab_size != 5)
            throw std::invalid_argument("sudoku task requires response_len = 16 and vocab_size = 5");
    }
    if (checkpoint_interval < 0 || eval_interval < 0 || eval_queries < 0)
        throw std::invalid_argument("intervals must be >= 0");
}

} // namespace egspo

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "egspo/trainer.hpp"

namespace egspo {

/// Sectioned key/value config file ([section] then key = value lines, '#'
/// comments). Sections and keys keep their first-seen order so that
/// load -> serialize round-trips are stable.
class IniFile {
public:
    static IniFile parse(const std::string& text);
    static IniFile load(const std::string& path);

    std::string serialize() const;

    bool has(const std::string& section, const std::string& key) const;
    std::string get(const std::string& section, const std::string& key) const;
    std::string get_or(const std::string& section, const std::string& key, const std::string& fallback) const;
    void set(const std::string& section, const std::string& key, const std::string& value);

    double get_double(const std::string& section, const std::string& key, double fallback) const;
    int get_int(const std::string& section, const std::string& key, int fallback) const;
    std::uint64_t get_u64(const std::string& section, const std::string& key, std::uint64_t fallback) const;

private:
    struct Section {
        std::string name;
        std::vector<std::pair<std::string, std::string>> entries;
    };
    std::vector<Section> sections_;

    const Section* find(const std::string& name) const;
    Section& find_or_add(const std::string& name);
};

/// Everything one experiment needs: the task, the trainer hyperparameters,
/// the strategy, and output plumbing.
struct ExperimentConfig {
    std::string task_name = "target_match";
    int query_len = 4;
    int num_queries = 1;
    std::uint64_t task_seed = 0;
    double init_scale = 0.1;
    std::uint64_t init_seed = 0;
    int embed_dim = 16;
    int hidden_dim = 32;
    TrainConfig train{};
    std::string out_dir = ".";
    int checkpoint_interval = 0; // 0 = final checkpoint only
    int eval_interval = 0;       // 0 = no periodic eval
    int eval_queries = 32;

    static ExperimentConfig from_ini(const IniFile& ini);
    IniFile to_ini() const;

    void validate() const;
};

} // namespace egspo

#include "egspo/metrics.hpp"

#include <stdexcept>

#include <json.hpp>

namespace egspo {

std::string metrics_record_to_json(const UpdateMetrics& rec) {
    nlohmann::ordered_json j;
    j["update"] = rec.update;
    j["mean_reward"] = rec.mean_reward;
    j["loss"] = rec.loss;
    j["kl"] = rec.kl;
    j["mean_entropy"] = rec.mean_entropy;
    j["selected_step_histogram"] = rec.selected_step_histogram;
    j["forward_passes"] = rec.counters.forward_passes;
    j["flops_proxy"] = rec.counters.flops_proxy;
    j["samples"] = rec.counters.samples;
    j["gradient_steps"] = rec.counters.gradient_steps;
    j["wall_ms"] = rec.wall_ms;
    j["seed"] = rec.seed;
    return j.dump();
}

JsonlMetricsWriter::JsonlMetricsWriter(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("JsonlMetricsWriter: cannot open " + path);
}

void JsonlMetricsWriter::write(const UpdateMetrics& rec) {
    out_ << metrics_record_to_json(rec) << '\n';
    if (!out_) throw std::runtime_error("JsonlMetricsWriter: write failed");
}

} // namespace egspo

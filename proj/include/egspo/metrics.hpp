#pragma once

#include <fstream>
#include <string>

#include "egspo/trainer.hpp"

namespace egspo {

/// Append-only JSON-lines metrics writer: one record per update with the
/// fixed field set {update, mean_reward, loss, kl, mean_entropy,
/// selected_step_histogram, forward_passes, flops_proxy, samples,
/// gradient_steps, wall_ms, seed}.
class JsonlMetricsWriter {
public:
    explicit JsonlMetricsWriter(const std::string& path);

    void write(const UpdateMetrics& rec);
    void flush() { out_.flush(); }

    MetricsSink sink() {
        return [this](const UpdateMetrics& rec) { write(rec); };
    }

private:
    std::ofstream out_;
};

std::string metrics_record_to_json(const UpdateMetrics& rec);

} // namespace egspo

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace off2on {

/// One evaluation-interval record of a training run. Serialized as one JSON
/// object per line; all fields except wall_clock_s are deterministic
/// functions of (config, seed).
struct MetricsRecord {
    long step = 0;
    double eval_return_mean = 0.0;
    double eval_return_std = 0.0;
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    double dr_loss = 0.0;
    double offline_fraction = 1.0;  // share of offline-tagged samples in update batches
    std::optional<double> auroc;   // filled only when the run tracks it
    double wall_clock_s = 0.0;

    std::string to_json_line() const;
    static MetricsRecord from_json_line(const std::string& line);
};

/// Append-only line-delimited metrics stream. The first line is a header
/// object carrying the full resolved run config.
class MetricsWriter {
public:
    MetricsWriter(const std::filesystem::path& path, const std::string& resolved_config_json);
    void append(const MetricsRecord& record);
    void flush() { out_.flush(); }

private:
    std::ofstream out_;
};

struct MetricsStream {
    std::string config_json;  // header line payload
    std::vector<MetricsRecord> records;
};

MetricsStream read_metrics(const std::filesystem::path& path);

/// Offline-sample share per record, in step order (buffer-composition curve).
std::vector<std::pair<long, double>> buffer_composition_analysis(const MetricsStream& stream);

}  // namespace off2on

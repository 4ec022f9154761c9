#include "off2on/metrics.hpp"

#include "json.hpp"
#include "off2on/errors.hpp"

namespace off2on {

using ordered_json = nlohmann::ordered_json;

std::string MetricsRecord::to_json_line() const {
    ordered_json j;
    j["step"] = step;
    j["eval_return_mean"] = eval_return_mean;
    j["eval_return_std"] = eval_return_std;
    j["critic_loss"] = critic_loss;
    j["actor_loss"] = actor_loss;
    j["dr_loss"] = dr_loss;
    j["offline_fraction"] = offline_fraction;
    if (auroc.has_value())
        j["auroc"] = *auroc;
    else
        j["auroc"] = nullptr;
    j["wall_clock_s"] = wall_clock_s;
    return j.dump();
}

MetricsRecord MetricsRecord::from_json_line(const std::string& line) {
    ordered_json j = ordered_json::parse(line, nullptr, false);
    if (j.is_discarded())
        throw DataFormatError(DataFormatError::Kind::CorruptHeader, "metrics: invalid JSON line");
    MetricsRecord r;
    r.step = j.at("step").get<long>();
    r.eval_return_mean = j.at("eval_return_mean").get<double>();
    r.eval_return_std = j.at("eval_return_std").get<double>();
    r.critic_loss = j.at("critic_loss").get<double>();
    r.actor_loss = j.at("actor_loss").get<double>();
    r.dr_loss = j.at("dr_loss").get<double>();
    r.offline_fraction = j.at("offline_fraction").get<double>();
    if (j.contains("auroc") && !j.at("auroc").is_null()) r.auroc = j.at("auroc").get<double>();
    r.wall_clock_s = j.value("wall_clock_s", 0.0);
    return r;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path,
                             const std::string& resolved_config_json) {
    out_.open(path, std::ios::trunc);
    if (!out_)
        throw DataFormatError(DataFormatError::Kind::Io, "cannot open metrics file: " + path.string());
    ordered_json header;
    header["config"] = ordered_json::parse(resolved_config_json);
    out_ << header.dump() << "\n";
}

void MetricsWriter::append(const MetricsRecord& record) {
    out_ << record.to_json_line() << "\n";
    out_.flush();
}

MetricsStream read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw DataFormatError(DataFormatError::Kind::Io, "cannot open metrics file: " + path.string());
    MetricsStream stream;
    std::string line;
    if (!std::getline(in, line))
        throw DataFormatError(DataFormatError::Kind::Truncated, "metrics: missing header line");
    ordered_json header = ordered_json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.contains("config"))
        throw DataFormatError(DataFormatError::Kind::CorruptHeader, "metrics: bad header line");
    stream.config_json = header.at("config").dump();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        stream.records.push_back(MetricsRecord::from_json_line(line));
    }
    return stream;
}

std::vector<std::pair<long, double>> buffer_composition_analysis(const MetricsStream& stream) {
    std::vector<std::pair<long, double>> curve;
    curve.reserve(stream.records.size());
    for (const auto& r : stream.records) curve.emplace_back(r.step, r.offline_fraction);
    return curve;
}

}  // namespace off2on

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "off2on/agents.hpp"
#include "off2on/density_ratio.hpp"
#include "off2on/env.hpp"

namespace off2on {

enum class SamplingStrategy : std::uint8_t { Balanced = 0, Uniform = 1, OnlineOnly = 2 };
enum class QInit : std::uint8_t { Cql = 0, Fqe = 1 };
enum class FinetuneObjective : std::uint8_t { Sac = 0, CqlReg = 1 };

const char* strategy_name(SamplingStrategy s);
SamplingStrategy strategy_from_name(std::string_view name);
const char* q_init_name(QInit q);
QInit q_init_from_name(std::string_view name);
const char* objective_name(FinetuneObjective o);
FinetuneObjective objective_from_name(std::string_view name);

/// Fully resolved run configuration. Every field has a documented default;
/// flag values override file values override defaults. The resolved config is
/// echoed verbatim into run outputs and reloading the echo reproduces the run.
struct RunConfig {
    // Task selection
    std::string env_id = "point_mass_dense";
    std::string dataset;        // input dataset path (train-offline, finetune)
    std::string tier = "random";  // dataset tier (gen-data)
    long dataset_size = 100000;   // transitions per generated dataset

    // Agent & ensemble
    int ensemble_size = 5;
    std::vector<int> hidden_dims = {64, 64};
    double gamma = 0.99;
    double alpha = 0.2;
    bool auto_alpha = false;
    bool twin_q = true;
    double tau = 0.005;

    // Optimization
    double lr_policy = 3e-4;
    double lr_value = 3e-4;
    double lr_density_ratio = 3e-4;
    int batch_size = 256;

    // Conservative regularizer
    double cql_alpha0 = 5.0;
    int cql_num_sampled_actions = 10;
    bool cql_sample_uniform = true;
    bool cql_sample_current_policy = true;
    bool cql_sample_next_policy = false;

    // Balanced replay
    double rho = 0.5;
    /// Self-normalization temperature; unset resolves per env
    /// (dense -> 5.0, sparse -> 2.5).
    std::optional<double> temperature;
    std::string denominator_mode = "offline";
    long buffer_capacity = 0;  // 0: offline size + env steps + margin

    // Phase lengths
    long offline_steps = 50000;  // 500 epochs x 100 steps
    long fqe_steps = 25000;
    long total_env_steps = 50000;
    int warmup_multiplier = 5;

    // Fine-tuning switches
    std::string strategy = "balanced";
    std::string q_init = "cql";
    std::string objective = "sac";

    // Evaluation & logging
    int eval_interval = 1000;
    int eval_episodes = 10;
    bool track_auroc = false;
    int auroc_fake_per_real = 50;

    // Behavior-policy training (dataset generation)
    long behavior_train_steps = 20000;
    int behavior_eval_interval = 500;
    int behavior_eval_episodes = 10;
    double medium_band_lo = 0.35;
    double medium_band_hi = 0.45;

    std::vector<long> seeds = {0, 1, 2, 3};

    // Environment constants (versioned; overridable per run)
    EnvConfig env;

    SamplingStrategy strategy_enum() const { return strategy_from_name(strategy); }
    QInit q_init_enum() const { return q_init_from_name(q_init); }
    FinetuneObjective objective_enum() const { return objective_from_name(objective); }
    DenominatorMode denominator_mode_enum() const {
        return denominator_mode_from_name(denominator_mode);
    }
    CqlParams cql_params() const;
    /// Temperature with the per-env default applied.
    double resolved_temperature() const;
    long resolved_buffer_capacity(std::size_t offline_size) const;
};

/// Validates all invariants; throws ConfigError naming the offending key.
void validate_config(const RunConfig& cfg);

/// Serialization of the resolved config (canonical key order).
std::string config_to_json(const RunConfig& cfg);
/// Parses a JSON document; unknown keys are rejected with their key path.
RunConfig config_from_json(const std::string& json_text);

RunConfig load_config_file(const std::filesystem::path& path);

/// defaults <- file <- flag overrides (each override is a key/value pair in
/// JSON text form). Validation runs on the result.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::pair<std::string, std::string>>& flag_overrides);

/// Fingerprint of the resolved config (stable across processes).
std::uint64_t config_hash(const RunConfig& cfg);

}  // namespace off2on

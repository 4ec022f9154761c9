#include "off2on/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "off2on/errors.hpp"
#include "off2on/serialize.hpp"

namespace off2on {

using ordered_json = nlohmann::ordered_json;

const char* strategy_name(SamplingStrategy s) {
    switch (s) {
        case SamplingStrategy::Balanced: return "balanced";
        case SamplingStrategy::Uniform: return "uniform";
        case SamplingStrategy::OnlineOnly: return "online_only";
    }
    return "unknown";
}

SamplingStrategy strategy_from_name(std::string_view name) {
    if (name == "balanced") return SamplingStrategy::Balanced;
    if (name == "uniform") return SamplingStrategy::Uniform;
    if (name == "online_only") return SamplingStrategy::OnlineOnly;
    throw ConfigError("config key 'strategy': unknown value '" + std::string(name) +
                      "' (want balanced|uniform|online_only)");
}

const char* q_init_name(QInit q) { return q == QInit::Cql ? "cql" : "fqe"; }

QInit q_init_from_name(std::string_view name) {
    if (name == "cql") return QInit::Cql;
    if (name == "fqe") return QInit::Fqe;
    throw ConfigError("config key 'q_init': unknown value '" + std::string(name) + "' (want cql|fqe)");
}

const char* objective_name(FinetuneObjective o) {
    return o == FinetuneObjective::Sac ? "sac" : "cql_reg";
}

FinetuneObjective objective_from_name(std::string_view name) {
    if (name == "sac") return FinetuneObjective::Sac;
    if (name == "cql_reg") return FinetuneObjective::CqlReg;
    throw ConfigError("config key 'objective': unknown value '" + std::string(name) +
                      "' (want sac|cql_reg)");
}

CqlParams RunConfig::cql_params() const {
    CqlParams p;
    p.alpha0 = cql_alpha0;
    p.num_sampled_actions = cql_num_sampled_actions;
    p.sample_uniform = cql_sample_uniform;
    p.sample_current_policy = cql_sample_current_policy;
    p.sample_next_policy = cql_sample_next_policy;
    return p;
}

double RunConfig::resolved_temperature() const {
    if (temperature.has_value()) return *temperature;
    return env_id == "point_mass_sparse" ? 2.5 : 5.0;
}

long RunConfig::resolved_buffer_capacity(std::size_t offline_size) const {
    if (buffer_capacity > 0) return buffer_capacity;
    return static_cast<long>(offline_size) + total_env_steps + 4096;
}

namespace {

template <typename T>
void read_field(const ordered_json& j, const std::string& key, T& out, const std::string& prefix) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + prefix + key + "': wrong type");
    }
}

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "env_id", "dataset", "tier", "dataset_size", "ensemble_size", "hidden_dims", "gamma",
        "alpha", "auto_alpha", "twin_q", "tau", "lr_policy", "lr_value", "lr_density_ratio",
        "batch_size", "cql_alpha0", "cql_num_sampled_actions", "cql_sample_uniform",
        "cql_sample_current_policy", "cql_sample_next_policy", "rho", "temperature",
        "denominator_mode", "buffer_capacity", "offline_steps", "fqe_steps", "total_env_steps",
        "warmup_multiplier", "strategy", "q_init", "objective", "eval_interval", "eval_episodes",
        "track_auroc", "auroc_fake_per_real", "behavior_train_steps", "behavior_eval_interval",
        "behavior_eval_episodes", "medium_band_lo", "medium_band_hi", "seeds", "env"};
    return keys;
}

const std::set<std::string>& known_env_keys() {
    static const std::set<std::string> keys = {
        "version", "dt", "v_max", "c_ctrl", "r_goal", "arena_half", "episode_len_dense",
        "episode_len_sparse", "start_x", "start_y", "start_noise", "goal_x", "goal_y", "goal_box",
        "goal_min_dist", "sparse_start_noise"};
    return keys;
}

void apply_json(const ordered_json& j, RunConfig& cfg) {
    for (const auto& item : j.items()) {
        if (known_keys().find(item.key()) == known_keys().end())
            throw ConfigError("config: unknown key '" + item.key() + "'");
    }
    read_field(j, "env_id", cfg.env_id, "");
    read_field(j, "dataset", cfg.dataset, "");
    read_field(j, "tier", cfg.tier, "");
    read_field(j, "dataset_size", cfg.dataset_size, "");
    read_field(j, "ensemble_size", cfg.ensemble_size, "");
    read_field(j, "hidden_dims", cfg.hidden_dims, "");
    read_field(j, "gamma", cfg.gamma, "");
    read_field(j, "alpha", cfg.alpha, "");
    read_field(j, "auto_alpha", cfg.auto_alpha, "");
    read_field(j, "twin_q", cfg.twin_q, "");
    read_field(j, "tau", cfg.tau, "");
    read_field(j, "lr_policy", cfg.lr_policy, "");
    read_field(j, "lr_value", cfg.lr_value, "");
    read_field(j, "lr_density_ratio", cfg.lr_density_ratio, "");
    read_field(j, "batch_size", cfg.batch_size, "");
    read_field(j, "cql_alpha0", cfg.cql_alpha0, "");
    read_field(j, "cql_num_sampled_actions", cfg.cql_num_sampled_actions, "");
    read_field(j, "cql_sample_uniform", cfg.cql_sample_uniform, "");
    read_field(j, "cql_sample_current_policy", cfg.cql_sample_current_policy, "");
    read_field(j, "cql_sample_next_policy", cfg.cql_sample_next_policy, "");
    read_field(j, "rho", cfg.rho, "");
    if (j.contains("temperature")) {
        if (j.at("temperature").is_null()) {
            cfg.temperature.reset();
        } else {
            double t;
            read_field(j, "temperature", t, "");
            cfg.temperature = t;
        }
    }
    read_field(j, "denominator_mode", cfg.denominator_mode, "");
    read_field(j, "buffer_capacity", cfg.buffer_capacity, "");
    read_field(j, "offline_steps", cfg.offline_steps, "");
    read_field(j, "fqe_steps", cfg.fqe_steps, "");
    read_field(j, "total_env_steps", cfg.total_env_steps, "");
    read_field(j, "warmup_multiplier", cfg.warmup_multiplier, "");
    read_field(j, "strategy", cfg.strategy, "");
    read_field(j, "q_init", cfg.q_init, "");
    read_field(j, "objective", cfg.objective, "");
    read_field(j, "eval_interval", cfg.eval_interval, "");
    read_field(j, "eval_episodes", cfg.eval_episodes, "");
    read_field(j, "track_auroc", cfg.track_auroc, "");
    read_field(j, "auroc_fake_per_real", cfg.auroc_fake_per_real, "");
    read_field(j, "behavior_train_steps", cfg.behavior_train_steps, "");
    read_field(j, "behavior_eval_interval", cfg.behavior_eval_interval, "");
    read_field(j, "behavior_eval_episodes", cfg.behavior_eval_episodes, "");
    read_field(j, "medium_band_lo", cfg.medium_band_lo, "");
    read_field(j, "medium_band_hi", cfg.medium_band_hi, "");
    read_field(j, "seeds", cfg.seeds, "");
    if (j.contains("env")) {
        const auto& je = j.at("env");
        if (!je.is_object()) throw ConfigError("config key 'env': wrong type (want object)");
        for (const auto& item : je.items()) {
            if (known_env_keys().find(item.key()) == known_env_keys().end())
                throw ConfigError("config: unknown key 'env." + item.key() + "'");
        }
        read_field(je, "version", cfg.env.version, "env.");
        read_field(je, "dt", cfg.env.dt, "env.");
        read_field(je, "v_max", cfg.env.v_max, "env.");
        read_field(je, "c_ctrl", cfg.env.c_ctrl, "env.");
        read_field(je, "r_goal", cfg.env.r_goal, "env.");
        read_field(je, "arena_half", cfg.env.arena_half, "env.");
        read_field(je, "episode_len_dense", cfg.env.episode_len_dense, "env.");
        read_field(je, "episode_len_sparse", cfg.env.episode_len_sparse, "env.");
        read_field(je, "start_x", cfg.env.start_x, "env.");
        read_field(je, "start_y", cfg.env.start_y, "env.");
        read_field(je, "start_noise", cfg.env.start_noise, "env.");
        read_field(je, "goal_x", cfg.env.goal_x, "env.");
        read_field(je, "goal_y", cfg.env.goal_y, "env.");
        read_field(je, "goal_box", cfg.env.goal_box, "env.");
        read_field(je, "goal_min_dist", cfg.env.goal_min_dist, "env.");
        read_field(je, "sparse_start_noise", cfg.env.sparse_start_noise, "env.");
    }
}

ordered_json to_ordered_json(const RunConfig& cfg) {
    ordered_json j;
    j["env_id"] = cfg.env_id;
    j["dataset"] = cfg.dataset;
    j["tier"] = cfg.tier;
    j["dataset_size"] = cfg.dataset_size;
    j["ensemble_size"] = cfg.ensemble_size;
    j["hidden_dims"] = cfg.hidden_dims;
    j["gamma"] = cfg.gamma;
    j["alpha"] = cfg.alpha;
    j["auto_alpha"] = cfg.auto_alpha;
    j["twin_q"] = cfg.twin_q;
    j["tau"] = cfg.tau;
    j["lr_policy"] = cfg.lr_policy;
    j["lr_value"] = cfg.lr_value;
    j["lr_density_ratio"] = cfg.lr_density_ratio;
    j["batch_size"] = cfg.batch_size;
    j["cql_alpha0"] = cfg.cql_alpha0;
    j["cql_num_sampled_actions"] = cfg.cql_num_sampled_actions;
    j["cql_sample_uniform"] = cfg.cql_sample_uniform;
    j["cql_sample_current_policy"] = cfg.cql_sample_current_policy;
    j["cql_sample_next_policy"] = cfg.cql_sample_next_policy;
    j["rho"] = cfg.rho;
    if (cfg.temperature.has_value())
        j["temperature"] = *cfg.temperature;
    else
        j["temperature"] = nullptr;
    j["denominator_mode"] = cfg.denominator_mode;
    j["buffer_capacity"] = cfg.buffer_capacity;
    j["offline_steps"] = cfg.offline_steps;
    j["fqe_steps"] = cfg.fqe_steps;
    j["total_env_steps"] = cfg.total_env_steps;
    j["warmup_multiplier"] = cfg.warmup_multiplier;
    j["strategy"] = cfg.strategy;
    j["q_init"] = cfg.q_init;
    j["objective"] = cfg.objective;
    j["eval_interval"] = cfg.eval_interval;
    j["eval_episodes"] = cfg.eval_episodes;
    j["track_auroc"] = cfg.track_auroc;
    j["auroc_fake_per_real"] = cfg.auroc_fake_per_real;
    j["behavior_train_steps"] = cfg.behavior_train_steps;
    j["behavior_eval_interval"] = cfg.behavior_eval_interval;
    j["behavior_eval_episodes"] = cfg.behavior_eval_episodes;
    j["medium_band_lo"] = cfg.medium_band_lo;
    j["medium_band_hi"] = cfg.medium_band_hi;
    j["seeds"] = cfg.seeds;
    ordered_json je;
    je["version"] = cfg.env.version;
    je["dt"] = cfg.env.dt;
    je["v_max"] = cfg.env.v_max;
    je["c_ctrl"] = cfg.env.c_ctrl;
    je["r_goal"] = cfg.env.r_goal;
    je["arena_half"] = cfg.env.arena_half;
    je["episode_len_dense"] = cfg.env.episode_len_dense;
    je["episode_len_sparse"] = cfg.env.episode_len_sparse;
    je["start_x"] = cfg.env.start_x;
    je["start_y"] = cfg.env.start_y;
    je["start_noise"] = cfg.env.start_noise;
    je["goal_x"] = cfg.env.goal_x;
    je["goal_y"] = cfg.env.goal_y;
    je["goal_box"] = cfg.env.goal_box;
    je["goal_min_dist"] = cfg.env.goal_min_dist;
    je["sparse_start_noise"] = cfg.env.sparse_start_noise;
    j["env"] = je;
    return j;
}

void check_positive(double value, const char* key) {
    if (!(value > 0.0)) throw ConfigError(std::string("config key '") + key + "': must be positive");
}

}  // namespace

void validate_config(const RunConfig& cfg) {
    if (!PointMassEnv::known_env(cfg.env_id))
        throw ConfigError("config key 'env_id': unknown env '" + cfg.env_id + "'");
    tier_from_name(cfg.tier);
    strategy_from_name(cfg.strategy);
    q_init_from_name(cfg.q_init);
    objective_from_name(cfg.objective);
    denominator_mode_from_name(cfg.denominator_mode);
    if (cfg.ensemble_size < 1) throw ConfigError("config key 'ensemble_size': must be >= 1");
    if (cfg.hidden_dims.empty()) throw ConfigError("config key 'hidden_dims': must be nonempty");
    for (int d : cfg.hidden_dims)
        if (d < 1) throw ConfigError("config key 'hidden_dims': entries must be >= 1");
    if (!(cfg.gamma >= 0.0 && cfg.gamma < 1.0))
        throw ConfigError("config key 'gamma': must be in [0, 1)");
    check_positive(cfg.alpha, "alpha");
    if (!(cfg.tau >= 0.0 && cfg.tau <= 1.0)) throw ConfigError("config key 'tau': must be in [0, 1]");
    check_positive(cfg.lr_policy, "lr_policy");
    check_positive(cfg.lr_value, "lr_value");
    check_positive(cfg.lr_density_ratio, "lr_density_ratio");
    if (cfg.batch_size < 1) throw ConfigError("config key 'batch_size': must be >= 1");
    if (cfg.cql_alpha0 < 0.0) throw ConfigError("config key 'cql_alpha0': must be nonnegative");
    if (cfg.cql_num_sampled_actions < 1)
        throw ConfigError("config key 'cql_num_sampled_actions': must be >= 1");
    if (!cfg.cql_sample_uniform && !cfg.cql_sample_current_policy && !cfg.cql_sample_next_policy)
        throw ConfigError("config key 'cql_sample_uniform': at least one sample source must be enabled");
    if (!(cfg.rho > 0.0 && cfg.rho < 1.0)) throw ConfigError("config key 'rho': must be in (0, 1)");
    if (cfg.temperature.has_value()) check_positive(*cfg.temperature, "temperature");
    if (cfg.buffer_capacity < 0) throw ConfigError("config key 'buffer_capacity': must be >= 0");
    if (cfg.offline_steps < 0) throw ConfigError("config key 'offline_steps': must be >= 0");
    if (cfg.fqe_steps < 1) throw ConfigError("config key 'fqe_steps': must be >= 1");
    if (cfg.total_env_steps < 0) throw ConfigError("config key 'total_env_steps': must be >= 0");
    if (cfg.warmup_multiplier < 0) throw ConfigError("config key 'warmup_multiplier': must be >= 0");
    if (cfg.eval_interval < 1) throw ConfigError("config key 'eval_interval': must be >= 1");
    if (cfg.eval_episodes < 1) throw ConfigError("config key 'eval_episodes': must be >= 1");
    if (cfg.auroc_fake_per_real < 1)
        throw ConfigError("config key 'auroc_fake_per_real': must be >= 1");
    if (cfg.dataset_size < 1) throw ConfigError("config key 'dataset_size': must be >= 1");
    if (cfg.behavior_train_steps < 1)
        throw ConfigError("config key 'behavior_train_steps': must be >= 1");
    if (cfg.behavior_eval_interval < 1)
        throw ConfigError("config key 'behavior_eval_interval': must be >= 1");
    if (cfg.behavior_eval_episodes < 1)
        throw ConfigError("config key 'behavior_eval_episodes': must be >= 1");
    if (!(cfg.medium_band_lo > 0.0 && cfg.medium_band_lo < cfg.medium_band_hi &&
          cfg.medium_band_hi < 1.0))
        throw ConfigError("config key 'medium_band_lo': need 0 < lo < hi < 1");
    if (cfg.seeds.empty()) throw ConfigError("config key 'seeds': must be nonempty");
    check_positive(cfg.env.dt, "env.dt");
    check_positive(cfg.env.v_max, "env.v_max");
    if (cfg.env.c_ctrl < 0.0) throw ConfigError("config key 'env.c_ctrl': must be >= 0");
    check_positive(cfg.env.r_goal, "env.r_goal");
    check_positive(cfg.env.arena_half, "env.arena_half");
    if (cfg.env.episode_len_dense < 1 || cfg.env.episode_len_sparse < 1)
        throw ConfigError("config key 'env.episode_len_dense': episode lengths must be >= 1");
}

std::string config_to_json(const RunConfig& cfg) { return to_ordered_json(cfg).dump(2); }

RunConfig config_from_json(const std::string& json_text) {
    ordered_json j = ordered_json::parse(json_text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config: invalid JSON");
    RunConfig cfg;
    apply_json(j, cfg);
    return cfg;
}

RunConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str());
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::pair<std::string, std::string>>& flag_overrides) {
    RunConfig cfg;
    if (file.has_value()) cfg = load_config_file(*file);
    if (!flag_overrides.empty()) {
        ordered_json j = ordered_json::object();
        for (const auto& [key, value_text] : flag_overrides) {
            ordered_json value = ordered_json::parse(value_text, nullptr, false);
            if (value.is_discarded())
                throw ConfigError("config key '" + key + "': invalid override value");
            // Dotted keys address the nested env block.
            if (key.rfind("env.", 0) == 0)
                j["env"][key.substr(4)] = value;
            else
                j[key] = value;
        }
        apply_json(j, cfg);
    }
    validate_config(cfg);
    return cfg;
}

std::uint64_t config_hash(const RunConfig& cfg) {
    const std::string dump = to_ordered_json(cfg).dump();
    return io::fnv1a(dump.data(), dump.size());
}

}  // namespace off2on

#include "off2on/dataset.hpp"

#include <fstream>

#include "off2on/errors.hpp"
#include "off2on/serialize.hpp"

namespace off2on {

namespace {

constexpr char kMagic[4] = {'O', '2', 'O', 'D'};
constexpr std::uint32_t kFormatVersion = 1;

void rollout_policy(PointMassEnv& env, const nn::MlpNetwork& policy, std::size_t count,
                    Rng& rng, std::vector<Transition>& out) {
    const int act = env.act_dim();
    Vector state = env.reset(rng);
    while (out.size() < count) {
        auto [mean, log_std] = policy.forward_gaussian(state);
        Matrix noise(1, act);
        for (int j = 0; j < act; ++j) noise(0, j) = rng.normal();
        auto sample = nn::gaussian_sample(mean.transpose(), log_std.transpose(), noise);
        Vector action = sample.action.row(0).transpose();
        auto step = env.step(action);
        out.push_back({state, action, step.reward, step.next_state, step.done});
        state = (step.done || step.truncated) ? env.reset(rng) : step.next_state;
    }
}

void rollout_random(PointMassEnv& env, std::size_t count, Rng& rng, std::vector<Transition>& out) {
    const int act = env.act_dim();
    Vector state = env.reset(rng);
    while (out.size() < count) {
        Vector action(act);
        for (int j = 0; j < act; ++j) action(j) = rng.uniform(-1.0, 1.0);
        auto step = env.step(action);
        out.push_back({state, action, step.reward, step.next_state, step.done});
        state = (step.done || step.truncated) ? env.reset(rng) : step.next_state;
    }
}

}  // namespace

const char* tier_name(Tier tier) {
    switch (tier) {
        case Tier::Random: return "random";
        case Tier::Medium: return "medium";
        case Tier::MediumReplay: return "medium_replay";
        case Tier::MediumExpert: return "medium_expert";
    }
    return "unknown";
}

Tier tier_from_name(std::string_view name) {
    if (name == "random") return Tier::Random;
    if (name == "medium") return Tier::Medium;
    if (name == "medium_replay") return Tier::MediumReplay;
    if (name == "medium_expert") return Tier::MediumExpert;
    throw ConfigError("unknown dataset tier: " + std::string(name));
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    if (dataset.transitions.empty()) throw ContractViolation("save_dataset: dataset is empty");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataFormatError(DataFormatError::Kind::Io, "cannot open for writing: " + path.string());

    const auto& meta = dataset.meta;
    os.write(kMagic, 4);
    io::write_pod<std::uint32_t>(os, kFormatVersion);
    io::write_string(os, meta.env_id);
    io::write_pod<std::int32_t>(os, meta.obs_dim);
    io::write_pod<std::int32_t>(os, meta.act_dim);
    io::write_pod<std::uint64_t>(os, dataset.transitions.size());
    io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(meta.tier));
    io::write_pod<std::uint64_t>(os, meta.seed);
    io::write_pod<std::uint64_t>(os, meta.behavior_hash);
    io::write_f64(os, meta.behavior_return);
    io::write_f64(os, meta.expert_return);
    io::write_f64(os, meta.random_return);
    io::write_f64(os, meta.medium_band_lo);
    io::write_f64(os, meta.medium_band_hi);
    io::write_pod<std::uint64_t>(os, meta.split_index);

    for (const auto& t : dataset.transitions) {
        if (t.state.size() != meta.obs_dim || t.next_state.size() != meta.obs_dim ||
            t.action.size() != meta.act_dim)
            throw ContractViolation("save_dataset: transition dims inconsistent with header");
        io::write_f64_span(os, t.state.data(), t.state.size());
        io::write_f64_span(os, t.action.data(), t.action.size());
        io::write_f64(os, t.reward);
        io::write_f64_span(os, t.next_state.data(), t.next_state.size());
        io::write_pod<std::uint8_t>(os, t.done ? 1 : 0);
    }
    if (!os) throw DataFormatError(DataFormatError::Kind::Io, "write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataFormatError(DataFormatError::Kind::Io, "cannot open: " + path.string());

    io::expect_magic(is, kMagic, "dataset " + path.string());
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kFormatVersion)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader,
                              "dataset: unsupported version " + std::to_string(version));

    Dataset dataset;
    auto& meta = dataset.meta;
    meta.env_id = io::read_string(is, 256);
    meta.obs_dim = io::read_pod<std::int32_t>(is);
    meta.act_dim = io::read_pod<std::int32_t>(is);
    const auto count = io::read_pod<std::uint64_t>(is);
    const auto tier_byte = io::read_pod<std::uint8_t>(is);
    if (tier_byte > 3)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader, "dataset: invalid tier tag");
    meta.tier = static_cast<Tier>(tier_byte);
    meta.seed = io::read_pod<std::uint64_t>(is);
    meta.behavior_hash = io::read_pod<std::uint64_t>(is);
    meta.behavior_return = io::read_f64(is);
    meta.expert_return = io::read_f64(is);
    meta.random_return = io::read_f64(is);
    meta.medium_band_lo = io::read_f64(is);
    meta.medium_band_hi = io::read_f64(is);
    meta.split_index = io::read_pod<std::uint64_t>(is);

    if (meta.obs_dim <= 0 || meta.act_dim <= 0 || count == 0)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader, "dataset: invalid header fields");
    if (PointMassEnv::known_env(meta.env_id)) {
        if (meta.obs_dim != PointMassEnv::registry_obs_dim(meta.env_id) ||
            meta.act_dim != PointMassEnv::registry_act_dim(meta.env_id))
            throw DataFormatError(
                DataFormatError::Kind::DimensionMismatch,
                "dataset: header dims do not match env registry for " + meta.env_id);
    }

    dataset.transitions.resize(count);
    for (auto& t : dataset.transitions) {
        t.state.resize(meta.obs_dim);
        io::read_f64_span(is, t.state.data(), t.state.size());
        t.action.resize(meta.act_dim);
        io::read_f64_span(is, t.action.data(), t.action.size());
        t.reward = io::read_f64(is);
        t.next_state.resize(meta.obs_dim);
        io::read_f64_span(is, t.next_state.data(), t.next_state.size());
        t.done = io::read_pod<std::uint8_t>(is) != 0;
    }
    return dataset;
}

Dataset generate_dataset(PointMassEnv& env, Tier tier, std::size_t size, Rng& rng,
                         const BehaviorArtifacts* behavior) {
    if (size == 0) throw ContractViolation("generate_dataset: size must be positive");
    if (tier != Tier::Random && behavior == nullptr)
        throw ConfigError("generate_dataset: tier '" + std::string(tier_name(tier)) +
                          "' needs a behavior checkpoint");

    Dataset dataset;
    dataset.meta.env_id = env.id();
    dataset.meta.obs_dim = env.obs_dim();
    dataset.meta.act_dim = env.act_dim();
    dataset.meta.tier = tier;
    dataset.meta.seed = rng.seed();
    dataset.transitions.reserve(size);

    switch (tier) {
        case Tier::Random: {
            rollout_random(env, size, rng, dataset.transitions);
            break;
        }
        case Tier::Medium: {
            rollout_policy(env, behavior->medium_policy, size, rng, dataset.transitions);
            dataset.meta.behavior_return = behavior->medium_return;
            break;
        }
        case Tier::MediumReplay: {
            // The recorded stream is what it is; `size` only caps it.
            const auto& stream = behavior->medium_replay_stream;
            if (stream.empty())
                throw ConfigError("generate_dataset: behavior artifacts carry no replay stream");
            const std::size_t n = std::min(size, stream.size());
            dataset.transitions.assign(stream.begin(), stream.begin() + n);
            dataset.meta.behavior_return = behavior->medium_return;
            break;
        }
        case Tier::MediumExpert: {
            const std::size_t half = size / 2;
            rollout_policy(env, behavior->medium_policy, half, rng, dataset.transitions);
            rollout_policy(env, behavior->expert_policy, size, rng, dataset.transitions);
            dataset.meta.behavior_return = behavior->medium_return;
            dataset.meta.expert_return = behavior->expert_return;
            dataset.meta.split_index = half;
            break;
        }
    }
    if (behavior != nullptr) {
        dataset.meta.behavior_hash = behavior->checkpoint_hash;
        dataset.meta.random_return = behavior->random_return;
        dataset.meta.medium_band_lo = behavior->medium_band_lo;
        dataset.meta.medium_band_hi = behavior->medium_band_hi;
        if (tier != Tier::MediumExpert) dataset.meta.expert_return = behavior->expert_return;
    }
    return dataset;
}

}  // namespace off2on

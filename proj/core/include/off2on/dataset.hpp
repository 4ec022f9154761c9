#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "off2on/env.hpp"
#include "off2on/nn.hpp"
#include "off2on/rng.hpp"

namespace off2on {

enum class Tier : std::uint8_t { Random = 0, Medium = 1, MediumReplay = 2, MediumExpert = 3 };

const char* tier_name(Tier tier);
Tier tier_from_name(std::string_view name);  // throws ConfigError on unknown names

/// Provenance and shape header stored with every dataset.
struct DatasetMeta {
    std::string env_id;
    int obs_dim = 0;
    int act_dim = 0;
    Tier tier = Tier::Random;
    std::uint64_t seed = 0;
    std::uint64_t behavior_hash = 0;   // hash of the generating policy checkpoint, 0 for random
    double behavior_return = 0.0;      // eval return of the generating policy (medium tiers)
    double expert_return = 0.0;        // eval return of the expert checkpoint (medium_expert)
    double random_return = 0.0;        // eval return of a uniform-random policy
    double medium_band_lo = 0.0;       // normalized-score band used to pick the medium checkpoint
    double medium_band_hi = 0.0;
    std::uint64_t split_index = 0;     // medium_expert: first index of the expert half
};

struct Dataset {
    DatasetMeta meta;
    std::vector<Transition> transitions;

    std::size_t size() const { return transitions.size(); }
};

/// Little-endian binary dataset file: magic, version, header, then packed
/// float64 transition records. Round-trips are lossless.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);

/// Throws DataFormatError with distinct kinds for corrupt headers, dimension
/// mismatches against the env registry, and truncated files.
Dataset load_dataset(const std::filesystem::path& path);

/// Everything generate_dataset needs about the behavior policies. Produced by
/// the pipeline's online SAC training run (see pipeline.hpp).
struct BehaviorArtifacts {
    nn::MlpNetwork medium_policy;
    nn::MlpNetwork expert_policy;
    double medium_return = 0.0;
    double expert_return = 0.0;
    double random_return = 0.0;
    double medium_band_lo = 0.0;
    double medium_band_hi = 0.0;
    std::uint64_t checkpoint_hash = 0;
    /// Replay stream recorded while training up to the medium checkpoint.
    std::vector<Transition> medium_replay_stream;
};

/// Rolls out the tier's policy in `env`:
///   random        - uniform actions on the box;
///   medium        - stochastic rollouts of the medium checkpoint;
///   medium_replay - the recorded replay stream (size acts as a cap);
///   medium_expert - first half medium rollouts, second half expert rollouts.
/// Medium tiers require `behavior`; throws ConfigError when missing.
Dataset generate_dataset(PointMassEnv& env, Tier tier, std::size_t size, Rng& rng,
                         const BehaviorArtifacts* behavior = nullptr);

}  // namespace off2on

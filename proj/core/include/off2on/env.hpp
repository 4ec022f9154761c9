#pragma once

#include <Eigen/Dense>
#include <string>
#include <string_view>

#include "off2on/nn.hpp"
#include "off2on/rng.hpp"

namespace off2on {

/// One environment step. `done` is true only on a genuine terminal state,
/// never on time-limit truncation, so Bellman backups bootstrap through
/// truncated episodes.
struct Transition {
    Vector state;
    Vector action;
    double reward = 0.0;
    Vector next_state;
    bool done = false;
};

/// Environment constants, fixed and version-stamped so results stay
/// comparable across runs. Overrides land in the resolved config echo.
struct EnvConfig {
    std::string version = "pm-v1";
    double dt = 0.1;
    double v_max = 1.0;
    double c_ctrl = 0.01;
    double r_goal = 0.15;
    double arena_half = 1.5;   // positions are clamped to [-arena_half, arena_half]^2
    int episode_len_dense = 50;
    int episode_len_sparse = 80;
    double start_x = -0.8, start_y = -0.8;
    double start_noise = 0.1;  // uniform half-width around the start position
    double goal_x = 0.8, goal_y = 0.8;  // fixed goal of the dense variant
    double goal_box = 0.8;     // sparse goals are uniform on [-goal_box, goal_box]^2
    double goal_min_dist = 0.5;  // sparse goals are resampled until this far from start
    double sparse_start_noise = 0.3;  // sparse episodes start near the origin
};

/// Planar double-integrator with a dense variant (4-dim state: position and
/// velocity; fixed goal; shaped reward) and a sparse variant (6-dim state:
/// position, velocity and a per-episode goal; 0/1 reward; terminal on
/// success).
///
/// Dynamics per step: v <- clip(v + dt * a, +-v_max) componentwise, then
/// p <- clip(p + dt * v, +-arena_half).
class PointMassEnv {
public:
    enum class Variant { Dense, Sparse };

    explicit PointMassEnv(Variant variant, EnvConfig cfg = {});

    /// Builds an environment from its registry id ("point_mass_dense" or
    /// "point_mass_sparse"); throws ConfigError on unknown ids.
    static PointMassEnv make(std::string_view env_id, EnvConfig cfg = {});
    static bool known_env(std::string_view env_id);
    static int registry_obs_dim(std::string_view env_id);
    static int registry_act_dim(std::string_view env_id);

    int obs_dim() const { return variant_ == Variant::Dense ? 4 : 6; }
    int act_dim() const { return 2; }
    int episode_len() const {
        return variant_ == Variant::Dense ? cfg_.episode_len_dense : cfg_.episode_len_sparse;
    }
    Variant variant() const { return variant_; }
    const EnvConfig& config() const { return cfg_; }
    std::string id() const {
        return variant_ == Variant::Dense ? "point_mass_dense" : "point_mass_sparse";
    }

    /// Largest dense per-step reward magnitude under this config.
    double max_dense_reward_magnitude() const;

    Vector reset(Rng& rng);

    struct StepResult {
        Vector next_state;
        double reward = 0.0;
        bool done = false;       // genuine terminal only
        bool truncated = false;  // episode length reached
    };
    /// Requires the action inside [-1, 1]^2 and an unfinished episode.
    StepResult step(const Vector& action);

    bool episode_finished() const { return finished_; }
    int step_count() const { return step_count_; }

private:
    Vector observation() const;

    Variant variant_;
    EnvConfig cfg_;
    Eigen::Vector2d pos_{0.0, 0.0};
    Eigen::Vector2d vel_{0.0, 0.0};
    Eigen::Vector2d goal_{0.0, 0.0};
    int step_count_ = 0;
    bool finished_ = true;  // must reset before stepping
};

}  // namespace off2on

#include "off2on/env.hpp"

#include <cmath>
#include <numbers>

#include "off2on/errors.hpp"

namespace off2on {

PointMassEnv::PointMassEnv(Variant variant, EnvConfig cfg) : variant_(variant), cfg_(std::move(cfg)) {}

PointMassEnv PointMassEnv::make(std::string_view env_id, EnvConfig cfg) {
    if (env_id == "point_mass_dense") return PointMassEnv(Variant::Dense, std::move(cfg));
    if (env_id == "point_mass_sparse") return PointMassEnv(Variant::Sparse, std::move(cfg));
    throw ConfigError("unknown env id: " + std::string(env_id));
}

bool PointMassEnv::known_env(std::string_view env_id) {
    return env_id == "point_mass_dense" || env_id == "point_mass_sparse";
}

int PointMassEnv::registry_obs_dim(std::string_view env_id) {
    if (env_id == "point_mass_dense") return 4;
    if (env_id == "point_mass_sparse") return 6;
    throw ConfigError("unknown env id: " + std::string(env_id));
}

int PointMassEnv::registry_act_dim(std::string_view env_id) {
    if (!known_env(env_id)) throw ConfigError("unknown env id: " + std::string(env_id));
    return 2;
}

double PointMassEnv::max_dense_reward_magnitude() const {
    const double diag = 2.0 * cfg_.arena_half * std::numbers::sqrt2;
    return diag + 2.0 * cfg_.c_ctrl;
}

Vector PointMassEnv::observation() const {
    Vector obs(obs_dim());
    obs(0) = pos_.x();
    obs(1) = pos_.y();
    obs(2) = vel_.x();
    obs(3) = vel_.y();
    if (variant_ == Variant::Sparse) {
        obs(4) = goal_.x();
        obs(5) = goal_.y();
    }
    return obs;
}

Vector PointMassEnv::reset(Rng& rng) {
    vel_.setZero();
    step_count_ = 0;
    finished_ = false;
    if (variant_ == Variant::Dense) {
        pos_.x() = cfg_.start_x + rng.uniform(-cfg_.start_noise, cfg_.start_noise);
        pos_.y() = cfg_.start_y + rng.uniform(-cfg_.start_noise, cfg_.start_noise);
        goal_ = {cfg_.goal_x, cfg_.goal_y};
    } else {
        pos_.x() = rng.uniform(-cfg_.sparse_start_noise, cfg_.sparse_start_noise);
        pos_.y() = rng.uniform(-cfg_.sparse_start_noise, cfg_.sparse_start_noise);
        do {
            goal_.x() = rng.uniform(-cfg_.goal_box, cfg_.goal_box);
            goal_.y() = rng.uniform(-cfg_.goal_box, cfg_.goal_box);
        } while ((goal_ - pos_).norm() < cfg_.goal_min_dist);
    }
    return observation();
}

PointMassEnv::StepResult PointMassEnv::step(const Vector& action) {
    if (finished_) throw ContractViolation("PointMassEnv::step: episode already finished; call reset");
    if (action.size() != act_dim()) throw ContractViolation("PointMassEnv::step: bad action dim");
    for (int i = 0; i < action.size(); ++i) {
        if (!(action(i) >= -1.0 && action(i) <= 1.0))
            throw ContractViolation("PointMassEnv::step: action outside [-1, 1]");
    }

    vel_ += cfg_.dt * Eigen::Vector2d(action(0), action(1));
    vel_ = vel_.cwiseMax(-cfg_.v_max).cwiseMin(cfg_.v_max);
    pos_ += cfg_.dt * vel_;
    pos_ = pos_.cwiseMax(-cfg_.arena_half).cwiseMin(cfg_.arena_half);
    ++step_count_;

    StepResult out;
    const double dist = (pos_ - goal_).norm();
    if (variant_ == Variant::Dense) {
        out.reward = -dist - cfg_.c_ctrl * action.squaredNorm();
        out.done = false;
    } else {
        const bool success = dist < cfg_.r_goal;
        out.reward = success ? 1.0 : 0.0;
        out.done = success;
    }
    out.truncated = !out.done && step_count_ >= episode_len();
    finished_ = out.done || out.truncated;
    out.next_state = observation();
    return out;
}

}  // namespace off2on

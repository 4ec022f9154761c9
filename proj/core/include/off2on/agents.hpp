#pragma once

#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "off2on/env.hpp"
#include "off2on/nn.hpp"
#include "off2on/rng.hpp"

namespace off2on {

/// Minibatch of transitions in matrix form (one row per sample).
struct TransitionBatch {
    Matrix states;
    Matrix actions;
    Vector rewards;
    Matrix next_states;
    Vector not_done;  // 1 - done, masks the bootstrap term

    Eigen::Index size() const { return states.rows(); }
    static TransitionBatch from(std::span<const Transition* const> transitions);
    static TransitionBatch from(const std::vector<Transition>& transitions,
                                std::span<const std::size_t> indices);
};

/// Scalar Adam state, used for the learnable temperature.
struct ScalarAdam {
    double m = 0.0;
    double v = 0.0;
    std::int64_t t = 0;
    /// Returns the update delta for one gradient (to be subtracted).
    double step(double grad, double lr);
};

/// One SAC-style agent: Gaussian policy, twin Q-functions and their delayed
/// targets, temperature. `twin_q = false` drops the second critic and the
/// min-backup (single-critic form used by some unit tests).
struct ActorCritic {
    nn::MlpNetwork policy;  // Gaussian head
    nn::MlpNetwork q1, q2;
    nn::MlpNetwork q1_target, q2_target;
    double alpha = 0.2;
    double gamma = 0.99;
    bool twin_q = true;
    ScalarAdam log_alpha_adam;  // used only with automatic temperature tuning

    static ActorCritic make(int obs_dim, int act_dim, const std::vector<int>& hidden_dims,
                            double alpha, double gamma, bool twin_q, Rng& rng);

    int obs_dim() const { return policy.input_dim(); }
    int act_dim() const { return policy.raw_output_dim() / 2; }

    /// min over live critics (single critic when twin_q is off).
    Vector q_min(const Matrix& states, const Matrix& actions) const;

    void polyak_targets(double tau);

    void save(std::ostream& os) const;
    static ActorCritic load(std::istream& is);
};

/// Delayed-parameter update: target <- (1 - tau) * target + tau * live.
void polyak_update(const nn::MlpNetwork& live, nn::MlpNetwork& target, double tau);

/// A fresh policy sample at a batch of states, shared between losses so a
/// single draw feeds every consumer.
struct NextActionSample {
    Matrix actions;    // squashed
    Vector log_probs;
};
NextActionSample sample_policy(const nn::MlpNetwork& policy, const Matrix& states,
                               const Matrix& noise);

struct CriticLossResult {
    double loss = 0.0;
    nn::GradientBatch grads_q1, grads_q2;
};

/// Squared soft-Bellman error of the live critics against
/// y = r + gamma * (1 - done) * (min_target_Q(s', a') - alpha * log pi(a'|s')),
/// with a' supplied by the caller (drawn fresh from the policy). The target
/// side is gradient-stopped; loss is 0.5 * mean squared residual per critic.
CriticLossResult sac_critic_loss(const ActorCritic& agent, const TransitionBatch& batch,
                                 const NextActionSample& next_action);

struct ActorLossResult {
    double loss = 0.0;
    nn::GradientBatch grads_policy;
    double mean_log_prob = 0.0;
};

/// mean(alpha * log pi(a|s) - min Q(s, a)) with a reparameterized from the
/// policy; Q parameters are gradient-stopped, gradients flow through the
/// sampled action into the policy.
ActorLossResult sac_actor_loss(const ActorCritic& agent, const Matrix& states, const Matrix& noise);

/// Trade-off and sampling plan for the conservative regularizer.
struct CqlParams {
    double alpha0 = 5.0;
    int num_sampled_actions = 10;  // per enabled source
    bool sample_uniform = true;
    bool sample_current_policy = true;
    bool sample_next_policy = false;

    void validate() const;
    int total_sources() const {
        return (sample_uniform ? 1 : 0) + (sample_current_policy ? 1 : 0) +
               (sample_next_policy ? 1 : 0);
    }
};

/// Importance-sampled action set for the conservative log-sum-exp, built once
/// per update and shared across ensemble members. Rows are state-major blocks
/// of K actions; log_densities carry the proposal density of each row.
struct CqlActionSet {
    Matrix actions;        // (B * K_total) x A
    Vector log_densities;  // B * K_total
    int per_state = 0;     // K_total
};
CqlActionSet make_cql_action_set(const CqlParams& params, const TransitionBatch& batch,
                                 const nn::MlpNetwork& current_policy, Rng& rng);

/// Conservative critic loss: the soft-Bellman term of sac_critic_loss plus
/// alpha0 * (logsumexp_a Q(s,a) - Q(s, a_data)) per live critic, with the
/// continuous log-sum-exp realized by the importance-weighted sample set
/// (max-shifted; overflow-safe). alpha0 = 0 reduces bit-for-bit to
/// sac_critic_loss.
CriticLossResult cql_critic_loss(const ActorCritic& agent, const CqlParams& params,
                                 const TransitionBatch& batch, const NextActionSample& next_action,
                                 const CqlActionSet& action_set);

struct FqeLossResult {
    double loss = 0.0;
    nn::GradientBatch grads;
};

/// Policy-evaluation Bellman error for a frozen policy: regression of q_net
/// toward r + gamma * (1 - done) * q_target(s', a' ~ pi). No entropy term,
/// no pessimism term, single critic.
FqeLossResult fqe_update(const nn::MlpNetwork& frozen_policy, const nn::MlpNetwork& q_net,
                         const nn::MlpNetwork& q_target, const TransitionBatch& batch,
                         const Matrix& next_noise, double gamma);

/// N independently trained members combined into one effective agent:
/// Q is the member mean of min(Q1, Q2); the policy is a Gaussian moment-match
/// of the member mixture (moments taken on the pre-squash Gaussians).
struct EnsembleAgent {
    std::vector<ActorCritic> members;

    int size() const { return static_cast<int>(members.size()); }
    int obs_dim() const { return members.front().obs_dim(); }
    int act_dim() const { return members.front().act_dim(); }
    double ensemble_alpha() const;

    /// Member mean of min(Q1, Q2), summed in member-index order.
    Vector ensemble_q(const Matrix& states, const Matrix& actions) const;
    double ensemble_q(const Vector& state, const Vector& action) const;

    /// Mixture moments per action dim: mean = avg of member means,
    /// var = avg(sigma_i^2 + mu_i^2) - mean^2 (clamped at kMinVariance).
    /// N = 1 is an exact identity wrapper around the single member.
    void policy_moments(const Matrix& states, Matrix* mean, Matrix* variance) const;
    std::pair<Vector, Vector> policy_moments(const Vector& state) const;

    /// Squashed sample from the moment-matched Gaussian (values only).
    NextActionSample sample_policy(const Matrix& states, const Matrix& noise) const;

    /// Deterministic action: tanh of the mixture mean.
    Vector act_deterministic(const Vector& state) const;

    void save(std::ostream& os) const;
    static EnsembleAgent load(std::istream& is);

    static constexpr double kMinVariance = 1e-12;
};

struct FinetuneStepConfig {
    double lr_policy = 3e-4;
    double lr_value = 3e-4;
    double tau = 0.005;
    bool cql_regularized = false;  // keep the conservative term during fine-tuning
    CqlParams cql;
    bool auto_alpha = false;
    double lr_alpha = 3e-4;
    int n_threads = 1;
};

struct FinetuneStepLosses {
    double critic_loss = 0.0;  // mean over members
    double actor_loss = 0.0;
    double mean_log_prob = 0.0;
};

/// One fine-tuning update: every member's critics regress toward their own
/// delayed targets using a shared next action drawn from the ensemble policy,
/// then all member policies take one step on the joint objective
/// mean(alpha * log pi_ens(a|s) - Q_ens(s,a)) with a drawn from the ensemble
/// policy; finally targets are Polyak-updated. With N = 1 and the same noise
/// stream this is numerically identical to a plain SAC step.
FinetuneStepLosses ensemble_finetune_step(EnsembleAgent& ensemble, const TransitionBatch& batch,
                                          const FinetuneStepConfig& cfg, Rng& noise_rng);

}  // namespace off2on

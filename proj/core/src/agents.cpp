#include "off2on/agents.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>

#include "off2on/errors.hpp"
#include "off2on/parallel.hpp"
#include "off2on/serialize.hpp"

namespace off2on {

namespace {

constexpr char kAgentMagic[4] = {'O', '2', 'A', 'C'};
constexpr char kEnsembleMagic[4] = {'O', '2', 'E', 'A'};
constexpr std::uint32_t kFormatVersion = 1;

Matrix concat_sa(const Matrix& states, const Matrix& actions) {
    Matrix sa(states.rows(), states.cols() + actions.cols());
    sa.leftCols(states.cols()) = states;
    sa.rightCols(actions.cols()) = actions;
    return sa;
}

/// Shared forward machinery of the soft-Bellman term.
struct BellmanContext {
    Matrix sa;
    nn::ForwardCache cache1, cache2;
    Vector q1_vals, q2_vals;
    Vector target;
    Vector res1, res2;
    double loss = 0.0;
};

BellmanContext make_bellman(const ActorCritic& agent, const TransitionBatch& batch,
                            const NextActionSample& next_action, double alpha) {
    const auto b = batch.size();
    if (next_action.actions.rows() != b)
        throw ContractViolation("critic loss: next-action sample size mismatch");

    BellmanContext ctx;
    const Matrix next_sa = concat_sa(batch.next_states, next_action.actions);
    Vector next_q = agent.q1_target.forward(next_sa).col(0);
    if (agent.twin_q) next_q = next_q.cwiseMin(agent.q2_target.forward(next_sa).col(0));

    ctx.target = batch.rewards +
                 agent.gamma * batch.not_done.cwiseProduct(next_q - alpha * next_action.log_probs);
    if (!ctx.target.allFinite()) throw TrainingDivergence("critic loss: non-finite Bellman target");

    ctx.sa = concat_sa(batch.states, batch.actions);
    ctx.q1_vals = agent.q1.forward(ctx.sa, &ctx.cache1).col(0);
    ctx.res1 = ctx.q1_vals - ctx.target;
    ctx.loss = 0.5 * ctx.res1.squaredNorm() / static_cast<double>(b);
    if (agent.twin_q) {
        ctx.q2_vals = agent.q2.forward(ctx.sa, &ctx.cache2).col(0);
        ctx.res2 = ctx.q2_vals - ctx.target;
        ctx.loss += 0.5 * ctx.res2.squaredNorm() / static_cast<double>(b);
    }
    return ctx;
}

}  // namespace

TransitionBatch TransitionBatch::from(std::span<const Transition* const> transitions) {
    if (transitions.empty()) throw ContractViolation("TransitionBatch: empty batch");
    const auto b = static_cast<Eigen::Index>(transitions.size());
    const auto obs = transitions[0]->state.size();
    const auto act = transitions[0]->action.size();
    TransitionBatch batch;
    batch.states.resize(b, obs);
    batch.actions.resize(b, act);
    batch.rewards.resize(b);
    batch.next_states.resize(b, obs);
    batch.not_done.resize(b);
    for (Eigen::Index i = 0; i < b; ++i) {
        const Transition& t = *transitions[i];
        if (t.state.size() != obs || t.action.size() != act)
            throw ContractViolation("TransitionBatch: inconsistent dimensions");
        batch.states.row(i) = t.state.transpose();
        batch.actions.row(i) = t.action.transpose();
        batch.rewards(i) = t.reward;
        batch.next_states.row(i) = t.next_state.transpose();
        batch.not_done(i) = t.done ? 0.0 : 1.0;
    }
    return batch;
}

TransitionBatch TransitionBatch::from(const std::vector<Transition>& transitions,
                                      std::span<const std::size_t> indices) {
    std::vector<const Transition*> ptrs;
    ptrs.reserve(indices.size());
    for (auto i : indices) ptrs.push_back(&transitions[i]);
    return from(ptrs);
}

double ScalarAdam::step(double grad, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad * grad;
    const double mh = m / (1.0 - std::pow(b1, static_cast<double>(t)));
    const double vh = v / (1.0 - std::pow(b2, static_cast<double>(t)));
    return lr * mh / (std::sqrt(vh) + eps);
}

ActorCritic ActorCritic::make(int obs_dim, int act_dim, const std::vector<int>& hidden_dims,
                              double alpha, double gamma, bool twin_q, Rng& rng) {
    if (!(alpha > 0.0)) throw ContractViolation("ActorCritic: alpha must be > 0");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ContractViolation("ActorCritic: gamma must be in [0, 1)");
    auto dims_with = [&hidden_dims](int in, int out) {
        std::vector<int> dims;
        dims.push_back(in);
        dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
        dims.push_back(out);
        return dims;
    };
    ActorCritic agent;
    agent.alpha = alpha;
    agent.gamma = gamma;
    agent.twin_q = twin_q;
    Rng policy_rng = rng.fork(1);
    Rng q1_rng = rng.fork(2);
    Rng q2_rng = rng.fork(3);
    agent.policy = nn::MlpNetwork(dims_with(obs_dim, 2 * act_dim), nn::OutputHead::Gaussian, policy_rng);
    agent.q1 = nn::MlpNetwork(dims_with(obs_dim + act_dim, 1), nn::OutputHead::Linear, q1_rng);
    agent.q2 = nn::MlpNetwork(dims_with(obs_dim + act_dim, 1), nn::OutputHead::Linear, q2_rng);
    agent.q1_target = agent.q1;
    agent.q2_target = agent.q2;
    return agent;
}

Vector ActorCritic::q_min(const Matrix& states, const Matrix& actions) const {
    const Matrix sa = concat_sa(states, actions);
    Vector q = q1.forward(sa).col(0);
    if (twin_q) q = q.cwiseMin(q2.forward(sa).col(0));
    return q;
}

void ActorCritic::polyak_targets(double tau) {
    q1_target.polyak_from(q1, tau);
    if (twin_q) q2_target.polyak_from(q2, tau);
}

void polyak_update(const nn::MlpNetwork& live, nn::MlpNetwork& target, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ContractViolation("polyak_update: tau must be in [0, 1]");
    target.polyak_from(live, tau);
}

NextActionSample sample_policy(const nn::MlpNetwork& policy, const Matrix& states,
                               const Matrix& noise) {
    Matrix mean, log_std;
    policy.forward_gaussian(states, &mean, &log_std);
    auto sample = nn::gaussian_sample(mean, log_std, noise);
    return {std::move(sample.action), std::move(sample.log_prob)};
}

CriticLossResult sac_critic_loss(const ActorCritic& agent, const TransitionBatch& batch,
                                 const NextActionSample& next_action) {
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    BellmanContext ctx = make_bellman(agent, batch, next_action, agent.alpha);
    CriticLossResult out;
    out.loss = ctx.loss;
    out.grads_q1 = agent.q1.backward(ctx.cache1, ctx.res1 * inv_b);
    if (agent.twin_q) out.grads_q2 = agent.q2.backward(ctx.cache2, ctx.res2 * inv_b);
    return out;
}

ActorLossResult sac_actor_loss(const ActorCritic& agent, const Matrix& states, const Matrix& noise) {
    const auto b = states.rows();
    const double inv_b = 1.0 / static_cast<double>(b);

    nn::ForwardCache policy_cache;
    Matrix mean, log_std;
    agent.policy.forward_gaussian(states, &mean, &log_std, &policy_cache);
    const auto sample = nn::gaussian_sample(mean, log_std, noise);
    const Matrix& a = sample.action;

    const Matrix sa = concat_sa(states, a);
    nn::ForwardCache q1_cache, q2_cache;
    const Vector q1_vals = agent.q1.forward(sa, &q1_cache).col(0);
    Vector q_min = q1_vals;
    Vector q2_vals;
    if (agent.twin_q) {
        q2_vals = agent.q2.forward(sa, &q2_cache).col(0);
        q_min = q_min.cwiseMin(q2_vals);
    }

    ActorLossResult out;
    out.mean_log_prob = sample.log_prob.mean();
    out.loss = agent.alpha * out.mean_log_prob - q_min.mean();

    // d loss / d a via the critic's action columns, routed to the pointwise
    // minimum critic (Q parameters stay fixed).
    Matrix upstream1 = Matrix::Zero(b, 1);
    Matrix upstream2 = Matrix::Zero(b, 1);
    for (Eigen::Index i = 0; i < b; ++i) {
        if (agent.twin_q && q2_vals(i) < q1_vals(i))
            upstream2(i, 0) = -inv_b;
        else
            upstream1(i, 0) = -inv_b;
    }
    const int obs = static_cast<int>(states.cols());
    const int act = static_cast<int>(a.cols());
    Matrix d_action = agent.q1.backward(q1_cache, upstream1, true).input.rightCols(act);
    if (agent.twin_q)
        d_action += agent.q2.backward(q2_cache, upstream2, true).input.rightCols(act);
    (void)obs;

    // Chain through u = mean + std * noise, a = tanh(u), and the log-prob:
    //   d logp / du = 2 tanh(u),  d logp / d log_std = -1 + via-u term.
    const Matrix std_noise = log_std.array().exp().matrix().cwiseProduct(noise);
    const Matrix du = (agent.alpha * inv_b) * 2.0 * a +
                      d_action.cwiseProduct((1.0 - a.array().square()).matrix());
    const Matrix d_mean = du;
    Matrix d_log_std = du.cwiseProduct(std_noise);
    d_log_std.array() += -agent.alpha * inv_b;

    Matrix upstream_policy(b, 2 * act);
    upstream_policy.leftCols(act) = d_mean;
    upstream_policy.rightCols(act) = d_log_std;
    out.grads_policy = agent.policy.backward(policy_cache, upstream_policy);
    return out;
}

void CqlParams::validate() const {
    if (alpha0 < 0.0) throw ContractViolation("CqlParams: alpha0 must be nonnegative");
    if (num_sampled_actions < 1) throw ContractViolation("CqlParams: need at least one sampled action");
    if (total_sources() == 0) throw ContractViolation("CqlParams: enable at least one sample source");
}

CqlActionSet make_cql_action_set(const CqlParams& params, const TransitionBatch& batch,
                                 const nn::MlpNetwork& current_policy, Rng& rng) {
    params.validate();
    const auto b = batch.size();
    const int act = static_cast<int>(batch.actions.cols());
    const int k = params.num_sampled_actions;
    const int k_total = k * params.total_sources();

    CqlActionSet set;
    set.per_state = k_total;
    set.actions.resize(b * k_total, act);
    set.log_densities.resize(b * k_total);

    Eigen::Index row = 0;
    if (params.sample_uniform) {
        const double log_density = -act * M_LN2;  // uniform on [-1, 1]^act
        for (Eigen::Index i = 0; i < b * k; ++i, ++row) {
            for (int j = 0; j < act; ++j) set.actions(row, j) = rng.uniform(-1.0, 1.0);
            set.log_densities(row) = log_density;
        }
    }
    auto add_policy_block = [&](const Matrix& states) {
        Matrix rep_states(b * k, states.cols());
        for (Eigen::Index i = 0; i < b; ++i)
            rep_states.middleRows(i * k, k) = states.row(i).replicate(k, 1);
        Matrix noise(b * k, act);
        for (Eigen::Index i = 0; i < noise.rows(); ++i)
            for (int j = 0; j < act; ++j) noise(i, j) = rng.normal();
        auto sample = sample_policy(current_policy, rep_states, noise);
        set.actions.middleRows(row, b * k) = sample.actions;
        set.log_densities.segment(row, b * k) = sample.log_probs;
        row += b * k;
    };
    if (params.sample_current_policy) add_policy_block(batch.states);
    if (params.sample_next_policy) add_policy_block(batch.next_states);
    return set;
}

CriticLossResult cql_critic_loss(const ActorCritic& agent, const CqlParams& params,
                                 const TransitionBatch& batch, const NextActionSample& next_action,
                                 const CqlActionSet& action_set) {
    params.validate();
    const auto b = batch.size();
    const double inv_b = 1.0 / static_cast<double>(b);
    BellmanContext ctx = make_bellman(agent, batch, next_action, agent.alpha);

    CriticLossResult out;
    out.loss = ctx.loss;

    if (params.alpha0 == 0.0) {
        // Exact reduction to the unregularized critic loss.
        out.grads_q1 = agent.q1.backward(ctx.cache1, ctx.res1 * inv_b);
        if (agent.twin_q) out.grads_q2 = agent.q2.backward(ctx.cache2, ctx.res2 * inv_b);
        return out;
    }

    const int k_total = action_set.per_state;
    if (action_set.actions.rows() != b * k_total)
        throw ContractViolation("cql_critic_loss: action set does not match batch size");

    // Rows of the importance sample are grouped per source; regroup them per
    // state for the log-sum-exp.
    const int k_per_source = k_total / params.total_sources();
    auto row_of = [&](Eigen::Index state, int j) {
        const int source = j / k_per_source;
        const int within = j % k_per_source;
        return static_cast<Eigen::Index>(source) * b * k_per_source + state * k_per_source + within;
    };
    Matrix rep_states_rowwise(b * k_total, batch.states.cols());
    Matrix actions_rowwise(b * k_total, action_set.actions.cols());
    Vector log_density_rowwise(b * k_total);
    for (Eigen::Index i = 0; i < b; ++i) {
        for (int j = 0; j < k_total; ++j) {
            const Eigen::Index src = row_of(i, j);
            const Eigen::Index dst = i * k_total + j;
            rep_states_rowwise.row(dst) = batch.states.row(i);
            actions_rowwise.row(dst) = action_set.actions.row(src);
            log_density_rowwise(dst) = action_set.log_densities(src);
        }
    }
    const Matrix stacked_sa = concat_sa(rep_states_rowwise, actions_rowwise);

    auto regularize = [&](const nn::MlpNetwork& q_net, const nn::ForwardCache& data_cache,
                          const Vector& data_res, const Vector& data_q,
                          nn::GradientBatch* grads_out) -> double {
        nn::ForwardCache stacked_cache;
        const Vector q_vals = q_net.forward(stacked_sa, &stacked_cache).col(0);
        Matrix stacked_upstream = Matrix::Zero(b * k_total, 1);
        double lse_mean = 0.0;
        for (Eigen::Index i = 0; i < b; ++i) {
            // max-shifted log(mean_j exp(q_j - log q_density_j))
            double shift = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < k_total; ++j)
                shift = std::max(shift, q_vals(i * k_total + j) - log_density_rowwise(i * k_total + j));
            double sum = 0.0;
            for (int j = 0; j < k_total; ++j)
                sum += std::exp(q_vals(i * k_total + j) - log_density_rowwise(i * k_total + j) - shift);
            lse_mean += (shift + std::log(sum / k_total)) * inv_b;
            for (int j = 0; j < k_total; ++j) {
                const Eigen::Index r = i * k_total + j;
                const double softmax =
                    std::exp(q_vals(r) - log_density_rowwise(r) - shift) / sum;
                stacked_upstream(r, 0) = params.alpha0 * inv_b * softmax;
            }
        }
        const double reg = params.alpha0 * (lse_mean - data_q.mean());
        // Data rows: Bellman residual upstream plus the -alpha0 * Q(s, a_data) term.
        Vector data_upstream = data_res * inv_b;
        data_upstream.array() -= params.alpha0 * inv_b;
        *grads_out = q_net.backward(data_cache, data_upstream);
        *grads_out += q_net.backward(stacked_cache, stacked_upstream);
        return reg;
    };

    out.loss += regularize(agent.q1, ctx.cache1, ctx.res1, ctx.q1_vals, &out.grads_q1);
    if (agent.twin_q)
        out.loss += regularize(agent.q2, ctx.cache2, ctx.res2, ctx.q2_vals, &out.grads_q2);
    return out;
}

FqeLossResult fqe_update(const nn::MlpNetwork& frozen_policy, const nn::MlpNetwork& q_net,
                         const nn::MlpNetwork& q_target, const TransitionBatch& batch,
                         const Matrix& next_noise, double gamma) {
    const auto b = batch.size();
    const double inv_b = 1.0 / static_cast<double>(b);
    const auto next_action = sample_policy(frozen_policy, batch.next_states, next_noise);
    const Vector next_q = q_target.forward(concat_sa(batch.next_states, next_action.actions)).col(0);
    const Vector y = batch.rewards + gamma * batch.not_done.cwiseProduct(next_q);
    if (!y.allFinite()) throw TrainingDivergence("fqe_update: non-finite target");

    nn::ForwardCache cache;
    const Vector q = q_net.forward(concat_sa(batch.states, batch.actions), &cache).col(0);
    const Vector res = q - y;
    FqeLossResult out;
    out.loss = 0.5 * res.squaredNorm() * inv_b;
    out.grads = q_net.backward(cache, res * inv_b);
    return out;
}

double EnsembleAgent::ensemble_alpha() const {
    double a = 0.0;
    for (const auto& m : members) a += m.alpha;
    return a / static_cast<double>(members.size());
}

Vector EnsembleAgent::ensemble_q(const Matrix& states, const Matrix& actions) const {
    Vector q = Vector::Zero(states.rows());
    for (const auto& m : members) q += m.q_min(states, actions);
    return q / static_cast<double>(members.size());
}

double EnsembleAgent::ensemble_q(const Vector& state, const Vector& action) const {
    return ensemble_q(Matrix(state.transpose()), Matrix(action.transpose()))(0);
}

void EnsembleAgent::policy_moments(const Matrix& states, Matrix* mean, Matrix* variance) const {
    const int n = size();
    if (n == 1) {
        // Identity wrapper: the member's own moments, bit-exact.
        Matrix m, ls;
        members[0].policy.forward_gaussian(states, &m, &ls);
        if (mean) *mean = m;
        if (variance) *variance = (2.0 * ls).array().exp().matrix();
        return;
    }
    Matrix mean_acc, mean_sq_acc, var_acc;
    for (int i = 0; i < n; ++i) {
        Matrix m, ls;
        members[i].policy.forward_gaussian(states, &m, &ls);
        const Matrix sigma_sq = (2.0 * ls).array().exp().matrix();
        if (i == 0) {
            mean_acc = m;
            mean_sq_acc = m.cwiseProduct(m);
            var_acc = sigma_sq;
        } else {
            mean_acc += m;
            mean_sq_acc += m.cwiseProduct(m);
            var_acc += sigma_sq;
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    Matrix mu = mean_acc * inv_n;
    Matrix var = (var_acc + mean_sq_acc) * inv_n - mu.cwiseProduct(mu);
    var = var.cwiseMax(kMinVariance);
    if (mean) *mean = std::move(mu);
    if (variance) *variance = std::move(var);
}

std::pair<Vector, Vector> EnsembleAgent::policy_moments(const Vector& state) const {
    Matrix mean, var;
    policy_moments(Matrix(state.transpose()), &mean, &var);
    return {mean.row(0).transpose(), var.row(0).transpose()};
}

NextActionSample EnsembleAgent::sample_policy(const Matrix& states, const Matrix& noise) const {
    if (size() == 1) {
        Matrix mean, log_std;
        members[0].policy.forward_gaussian(states, &mean, &log_std);
        auto sample = nn::gaussian_sample(mean, log_std, noise);
        return {std::move(sample.action), std::move(sample.log_prob)};
    }
    Matrix mean, var;
    policy_moments(states, &mean, &var);
    const Matrix log_std = (0.5 * var.array().log()).matrix();
    auto sample = nn::gaussian_sample(mean, log_std, noise);
    return {std::move(sample.action), std::move(sample.log_prob)};
}

Vector EnsembleAgent::act_deterministic(const Vector& state) const {
    Matrix mean, var;
    policy_moments(Matrix(state.transpose()), &mean, &var);
    return mean.row(0).transpose().array().tanh().matrix();
}

void EnsembleAgent::save(std::ostream& os) const {
    os.write(kEnsembleMagic, 4);
    io::write_pod<std::uint32_t>(os, kFormatVersion);
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(members.size()));
    for (const auto& m : members) m.save(os);
}

EnsembleAgent EnsembleAgent::load(std::istream& is) {
    io::expect_magic(is, kEnsembleMagic, "ensemble checkpoint");
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kFormatVersion)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader,
                              "ensemble checkpoint: unsupported version");
    const auto n = io::read_pod<std::uint32_t>(is);
    if (n == 0 || n > 1024)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader,
                              "ensemble checkpoint: member count out of range");
    EnsembleAgent ens;
    ens.members.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) ens.members.push_back(ActorCritic::load(is));
    return ens;
}

void ActorCritic::save(std::ostream& os) const {
    os.write(kAgentMagic, 4);
    io::write_pod<std::uint32_t>(os, kFormatVersion);
    io::write_f64(os, alpha);
    io::write_f64(os, gamma);
    io::write_pod<std::uint8_t>(os, twin_q ? 1 : 0);
    io::write_f64(os, log_alpha_adam.m);
    io::write_f64(os, log_alpha_adam.v);
    io::write_pod<std::int64_t>(os, log_alpha_adam.t);
    policy.save(os);
    q1.save(os);
    q2.save(os);
    q1_target.save(os);
    q2_target.save(os);
}

ActorCritic ActorCritic::load(std::istream& is) {
    io::expect_magic(is, kAgentMagic, "agent checkpoint");
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kFormatVersion)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader,
                              "agent checkpoint: unsupported version");
    ActorCritic agent;
    agent.alpha = io::read_f64(is);
    agent.gamma = io::read_f64(is);
    agent.twin_q = io::read_pod<std::uint8_t>(is) != 0;
    agent.log_alpha_adam.m = io::read_f64(is);
    agent.log_alpha_adam.v = io::read_f64(is);
    agent.log_alpha_adam.t = io::read_pod<std::int64_t>(is);
    agent.policy = nn::MlpNetwork::load(is);
    agent.q1 = nn::MlpNetwork::load(is);
    agent.q2 = nn::MlpNetwork::load(is);
    agent.q1_target = nn::MlpNetwork::load(is);
    agent.q2_target = nn::MlpNetwork::load(is);
    return agent;
}

namespace {

/// Joint actor objective over all member policies: the sampled action comes
/// from the moment-matched ensemble Gaussian, so gradients reach each member
/// through the mixture moments.
struct EnsembleActorResult {
    double loss = 0.0;
    double mean_log_prob = 0.0;
    std::vector<nn::GradientBatch> grads;  // per member policy
};

EnsembleActorResult ensemble_actor_loss(const EnsembleAgent& ens, const Matrix& states,
                                        const Matrix& noise, double alpha, int n_threads) {
    const int n = ens.size();
    const auto b = states.rows();
    const int act = ens.act_dim();
    const double inv_b = 1.0 / static_cast<double>(b);
    const double inv_n = 1.0 / static_cast<double>(n);

    EnsembleActorResult out;
    out.grads.resize(n);

    if (n == 1) {
        auto single = sac_actor_loss(ens.members[0], states, noise);
        out.loss = single.loss;
        out.mean_log_prob = single.mean_log_prob;
        out.grads[0] = std::move(single.grads_policy);
        return out;
    }

    // Member policy forwards (cached for the backward pass).
    std::vector<nn::ForwardCache> policy_caches(n);
    std::vector<Matrix> member_mean(n), member_log_std(n), member_sigma_sq(n);
    parallel_for(n, n_threads, [&](int i) {
        ens.members[i].policy.forward_gaussian(states, &member_mean[i], &member_log_std[i],
                                               &policy_caches[i]);
        member_sigma_sq[i] = (2.0 * member_log_std[i]).array().exp().matrix();
    });

    Matrix mean_ens = member_mean[0];
    Matrix mean_sq = member_mean[0].cwiseProduct(member_mean[0]);
    Matrix sigma_sq_sum = member_sigma_sq[0];
    for (int i = 1; i < n; ++i) {
        mean_ens += member_mean[i];
        mean_sq += member_mean[i].cwiseProduct(member_mean[i]);
        sigma_sq_sum += member_sigma_sq[i];
    }
    mean_ens *= inv_n;
    const Matrix var_raw = (sigma_sq_sum + mean_sq) * inv_n - mean_ens.cwiseProduct(mean_ens);
    const Matrix var = var_raw.cwiseMax(EnsembleAgent::kMinVariance);
    const Matrix log_std = (0.5 * var.array().log()).matrix();

    const auto sample = nn::gaussian_sample(mean_ens, log_std, noise);
    const Matrix& a = sample.action;
    out.mean_log_prob = sample.log_prob.mean();

    // Ensemble Q at the sampled actions; input grads routed to the argmin
    // critic of each member, scaled by 1/N.
    const Matrix sa = concat_sa(states, a);
    std::vector<Vector> q_contrib(n);
    Matrix d_action = Matrix::Zero(b, act);
    std::vector<Matrix> member_d_action(n);
    parallel_for(n, n_threads, [&](int i) {
        const auto& member = ens.members[i];
        nn::ForwardCache c1, c2;
        const Vector q1_vals = member.q1.forward(sa, &c1).col(0);
        Vector q_min = q1_vals;
        Vector q2_vals;
        if (member.twin_q) {
            q2_vals = member.q2.forward(sa, &c2).col(0);
            q_min = q_min.cwiseMin(q2_vals);
        }
        q_contrib[i] = q_min;
        Matrix upstream1 = Matrix::Zero(b, 1);
        Matrix upstream2 = Matrix::Zero(b, 1);
        for (Eigen::Index r = 0; r < b; ++r) {
            if (member.twin_q && q2_vals(r) < q1_vals(r))
                upstream2(r, 0) = -inv_b * inv_n;
            else
                upstream1(r, 0) = -inv_b * inv_n;
        }
        Matrix da = member.q1.backward(c1, upstream1, true).input.rightCols(act);
        if (member.twin_q) da += member.q2.backward(c2, upstream2, true).input.rightCols(act);
        member_d_action[i] = std::move(da);
    });
    Vector q_ens = Vector::Zero(b);
    for (int i = 0; i < n; ++i) {
        q_ens += q_contrib[i];
        d_action += member_d_action[i];
    }
    q_ens *= inv_n;
    out.loss = alpha * out.mean_log_prob - q_ens.mean();

    // Backward through the squash and the mixture moments.
    //   d logp/du = 2 tanh(u); d a/du = 1 - a^2; u = mean + sqrt(var) * eps.
    const Matrix du = (alpha * inv_b) * 2.0 * a +
                      d_action.cwiseProduct((1.0 - a.array().square()).matrix());
    Matrix d_mean_ens = du;
    // Via sqrt(var) * eps and via the -log_std term of the log-density.
    Matrix d_var = du.cwiseProduct(noise).cwiseQuotient(2.0 * var.array().sqrt().matrix());
    d_var -= (alpha * inv_b) * (0.5 * var.array().inverse()).matrix();
    // Clamped entries pass no gradient.
    for (Eigen::Index r = 0; r < d_var.rows(); ++r)
        for (Eigen::Index c = 0; c < d_var.cols(); ++c)
            if (var_raw(r, c) < EnsembleAgent::kMinVariance) d_var(r, c) = 0.0;

    parallel_for(n, n_threads, [&](int i) {
        // d var / d mu_i = (2/N)(mu_i - mean_ens); d var / d sigma_i^2 = 1/N.
        Matrix d_mean_i =
            d_mean_ens * inv_n + d_var.cwiseProduct((member_mean[i] - mean_ens) * (2.0 * inv_n));
        Matrix d_log_std_i = d_var.cwiseProduct(member_sigma_sq[i]) * (2.0 * inv_n);
        Matrix upstream(b, 2 * act);
        upstream.leftCols(act) = d_mean_i;
        upstream.rightCols(act) = d_log_std_i;
        out.grads[i] = ens.members[i].policy.backward(policy_caches[i], upstream);
    });
    return out;
}

}  // namespace

FinetuneStepLosses ensemble_finetune_step(EnsembleAgent& ensemble, const TransitionBatch& batch,
                                          const FinetuneStepConfig& cfg, Rng& noise_rng) {
    const int n = ensemble.size();
    const auto b = batch.size();
    const int act = ensemble.act_dim();

    // Fixed draw order keeps runs bit-reproducible regardless of threading.
    Matrix next_noise(b, act), actor_noise(b, act);
    for (Eigen::Index i = 0; i < b; ++i)
        for (int j = 0; j < act; ++j) next_noise(i, j) = noise_rng.normal();
    for (Eigen::Index i = 0; i < b; ++i)
        for (int j = 0; j < act; ++j) actor_noise(i, j) = noise_rng.normal();

    const double alpha = ensemble.ensemble_alpha();
    const auto next_action = ensemble.sample_policy(batch.next_states, next_noise);

    CqlActionSet action_set;
    if (cfg.cql_regularized && cfg.cql.alpha0 > 0.0) {
        // Sampled from the ensemble policy when N > 1; member 0 is the
        // ensemble policy when N == 1.
        if (n == 1) {
            action_set = make_cql_action_set(cfg.cql, batch, ensemble.members[0].policy, noise_rng);
        } else {
            // Build via a temporary moment-matched policy sample: reuse the
            // uniform part of make_cql_action_set and replace policy draws.
            CqlParams uniform_only = cfg.cql;
            uniform_only.sample_current_policy = false;
            uniform_only.sample_next_policy = false;
            CqlParams rest = cfg.cql;
            rest.sample_uniform = false;
            action_set.per_state = cfg.cql.num_sampled_actions * cfg.cql.total_sources();
            const int k = cfg.cql.num_sampled_actions;
            std::vector<Matrix> blocks;
            std::vector<Vector> block_densities;
            if (cfg.cql.sample_uniform) {
                auto u = make_cql_action_set(uniform_only, batch, ensemble.members[0].policy, noise_rng);
                blocks.push_back(std::move(u.actions));
                block_densities.push_back(std::move(u.log_densities));
            }
            auto ens_block = [&](const Matrix& states) {
                Matrix rep(b * k, states.cols());
                for (Eigen::Index i = 0; i < b; ++i)
                    rep.middleRows(i * k, k) = states.row(i).replicate(k, 1);
                Matrix noise(b * k, act);
                for (Eigen::Index i = 0; i < noise.rows(); ++i)
                    for (int j = 0; j < act; ++j) noise(i, j) = noise_rng.normal();
                auto s = ensemble.sample_policy(rep, noise);
                blocks.push_back(std::move(s.actions));
                block_densities.push_back(std::move(s.log_probs));
            };
            if (cfg.cql.sample_current_policy) ens_block(batch.states);
            if (cfg.cql.sample_next_policy) ens_block(batch.next_states);
            Eigen::Index rows = 0;
            for (const auto& blk : blocks) rows += blk.rows();
            action_set.actions.resize(rows, act);
            action_set.log_densities.resize(rows);
            Eigen::Index at = 0;
            for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
                action_set.actions.middleRows(at, blocks[bi].rows()) = blocks[bi];
                action_set.log_densities.segment(at, blocks[bi].rows()) = block_densities[bi];
                at += blocks[bi].rows();
            }
        }
    }

    FinetuneStepLosses losses;

    // Critic updates: members are independent given the shared next action.
    // The target's entropy term uses the ensemble policy's log-density; member
    // temperatures stay equal to the shared value by construction.
    std::vector<double> member_critic_losses(n, 0.0);
    parallel_for(n, cfg.n_threads, [&](int i) {
        auto& member = ensemble.members[i];
        CriticLossResult critic =
            (cfg.cql_regularized && cfg.cql.alpha0 > 0.0)
                ? cql_critic_loss(member, cfg.cql, batch, next_action, action_set)
                : sac_critic_loss(member, batch, next_action);
        member_critic_losses[i] = critic.loss;
        member.q1.adam_step(critic.grads_q1, cfg.lr_value);
        if (member.twin_q) member.q2.adam_step(critic.grads_q2, cfg.lr_value);
    });
    for (double l : member_critic_losses) losses.critic_loss += l / n;

    // Joint actor step.
    auto actor = ensemble_actor_loss(ensemble, batch.states, actor_noise, alpha, cfg.n_threads);
    losses.actor_loss = actor.loss;
    losses.mean_log_prob = actor.mean_log_prob;
    for (int i = 0; i < n; ++i)
        ensemble.members[i].policy.adam_step(actor.grads[i], cfg.lr_policy);

    if (cfg.auto_alpha) {
        // Shared temperature tuned toward the standard target entropy.
        const double target_entropy = -static_cast<double>(act);
        for (auto& member : ensemble.members) {
            const double grad = -(actor.mean_log_prob + target_entropy) * member.alpha;
            double log_alpha = std::log(member.alpha);
            log_alpha -= member.log_alpha_adam.step(grad, cfg.lr_alpha);
            member.alpha = std::exp(log_alpha);
        }
    }

    for (auto& member : ensemble.members) member.polyak_targets(cfg.tau);
    return losses;
}

}  // namespace off2on

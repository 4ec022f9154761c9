#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <utility>
#include <vector>

#include "off2on/rng.hpp"

namespace off2on {

// Row convention: one sample per row, so a batch of inputs is (batch x dim).
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace nn {

/// Output transform applied after the last affine layer.
///  - Linear:   raw output as-is.
///  - Gaussian: raw has 2*A columns; first A are the mean, last A are the
///              log-std clamped to [kLogStdMin, kLogStdMax].
///  - Nonneg:   softplus(raw) + kNonnegEps, strictly positive everywhere.
enum class OutputHead : std::uint8_t { Linear = 0, Gaussian = 1, Nonneg = 2 };

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kNonnegEps = 1e-6;

struct LayerGrads {
    Matrix w;
    Vector b;
};

/// Per-minibatch gradient accumulator, shape-congruent with the owning
/// network's parameters. `input` optionally carries d(loss)/d(input), which
/// losses use to chain through a network's inputs (e.g. the critic's action
/// columns inside the actor objective).
struct GradientBatch {
    std::vector<LayerGrads> layers;
    Matrix input;  // empty unless requested

    void set_zero();
    GradientBatch& operator+=(const GradientBatch& other);
    GradientBatch& scale(double factor);
    bool all_finite() const;
};

/// Activations recorded by a forward pass, consumed by backward().
struct ForwardCache {
    bool valid = false;
    Matrix input;
    std::vector<Matrix> hidden;  // post-ReLU activations, one per hidden layer
    Matrix raw;                  // pre-head output of the last affine layer
};

/// Feed-forward network with ReLU hidden layers, one of three output heads,
/// and built-in Adam state. All math is float64. Instances are not
/// internally synchronized; concurrent mutation of one instance is forbidden.
class MlpNetwork {
public:
    MlpNetwork() = default;

    /// He-uniform init for hidden layers, small uniform init for the output
    /// layer. Draw order is fixed, so a given (rng, dims) pair always
    /// produces the same parameters.
    MlpNetwork(std::vector<int> layer_dims, OutputHead head, Rng& rng);

    int input_dim() const { return layer_dims_.empty() ? 0 : layer_dims_.front(); }
    /// Raw output width (for Gaussian this is 2*A).
    int raw_output_dim() const { return layer_dims_.empty() ? 0 : layer_dims_.back(); }
    const std::vector<int>& layer_dims() const { return layer_dims_; }
    OutputHead head() const { return head_; }

    /// Batch forward for Linear/Nonneg heads. Pass a cache to enable
    /// backward() on this batch.
    Matrix forward(const Matrix& input, ForwardCache* cache = nullptr) const;
    /// Batch forward for the Gaussian head; writes mean and clamped log-std.
    void forward_gaussian(const Matrix& input, Matrix* mean, Matrix* log_std,
                          ForwardCache* cache = nullptr) const;

    /// Single-sample conveniences.
    Vector forward(const Vector& input) const;
    std::pair<Vector, Vector> forward_gaussian(const Vector& input) const;

    /// Exact reverse-mode gradients of a scalar loss whose per-output
    /// sensitivities are `upstream` (in head-output space; for Gaussian,
    /// columns are [d/d_mean | d/d_log_std]). Requires the cache of a prior
    /// forward on the same batch.
    GradientBatch backward(const ForwardCache& cache, const Matrix& upstream,
                           bool want_input_grads = false) const;

    GradientBatch zero_grads() const;

    /// One Adam update (beta1=0.9, beta2=0.999, eps=1e-8) with bias
    /// correction. Throws TrainingDivergence on non-finite gradients.
    void adam_step(const GradientBatch& grads, double lr);
    std::int64_t adam_step_count() const { return adam_t_; }

    /// target <- (1 - tau) * target + tau * live, elementwise over parameters.
    /// Adam state is not touched.
    void polyak_from(const MlpNetwork& live, double tau);

    std::vector<Matrix>& weights() { return weights_; }
    std::vector<Vector>& biases() { return biases_; }
    const std::vector<Matrix>& weights() const { return weights_; }
    const std::vector<Vector>& biases() const { return biases_; }

    std::size_t param_count() const;
    std::vector<double> flat_params() const;
    void set_flat_params(const std::vector<double>& flat);

    /// Versioned binary dump of dims, head, parameters and Adam state.
    /// Round-trips are bit-exact.
    void save(std::ostream& os) const;
    static MlpNetwork load(std::istream& is);

    bool congruent_with(const MlpNetwork& other) const;

private:
    void check_input(const Matrix& input) const;
    Matrix run_layers(const Matrix& input, ForwardCache* cache) const;

    std::vector<int> layer_dims_;
    OutputHead head_ = OutputHead::Linear;
    std::vector<Matrix> weights_;  // weights_[l] is (dims[l] x dims[l+1])
    std::vector<Vector> biases_;
    // Adam moments, shape-congruent with the parameters.
    std::vector<Matrix> adam_m_w_, adam_v_w_;
    std::vector<Vector> adam_m_b_, adam_v_b_;
    std::int64_t adam_t_ = 0;
};

/// Reparameterized draw from a tanh-squashed diagonal Gaussian.
/// u = mean + exp(log_std) * noise, action = tanh(u); log_prob includes the
/// tanh Jacobian correction, summed over action dimensions.
struct SquashedSample {
    Matrix pre_squash;  // u
    Matrix action;      // tanh(u), inside (-1, 1)
    Vector log_prob;    // one entry per row
};
SquashedSample gaussian_sample(const Matrix& mean, const Matrix& log_std, const Matrix& noise);

/// Log-density of given squashed actions under the policy (atanh path).
/// Actions are clamped slightly inside (-1, 1) before inversion.
Vector gaussian_log_prob(const Matrix& mean, const Matrix& log_std, const Matrix& action);

/// log(1 - tanh(u)^2), computed stably for large |u|.
double log_one_minus_tanh_sq(double u);

/// softplus with overflow guard.
double softplus(double x);

}  // namespace nn
}  // namespace off2on

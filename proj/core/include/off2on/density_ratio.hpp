#pragma once

#include <cstdint>
#include <iosfwd>

#include "off2on/nn.hpp"

namespace off2on {

enum class DenominatorMode : std::uint8_t { Offline = 0, Union = 1 };

const char* denominator_mode_name(DenominatorMode mode);
DenominatorMode denominator_mode_from_name(std::string_view name);

/// Likelihood-free estimator of the ratio between the online and offline
/// state-action densities. A positive-output network w(s,a) is trained by
/// maximizing the variational lower bound of the Jensen-Shannon divergence
/// between the two sample streams:
///
///   L = E_online[f'(w)] - E_denom[f*(f'(w))]
///
/// with f(y) = y log(2y/(y+1)) + log(2/(y+1)), f'(y) = log(2y/(y+1)) and
/// f*(t) = -log(2 - e^t), so f*(f'(w)) = log((w+1)/2). An equivalent "GAN"
/// form with discriminator D = w/(w+1) is
///
///   L = 2 log 2 + E_online[log D] + E_denom[log(1 - D)];
///
/// both are exposed for cross-checking. The bound peaks at the true density
/// ratio, and at two disjoint point masses its supremum is 2 log 2.
class DensityRatioEstimator {
public:
    DensityRatioEstimator() = default;
    /// Input dim is obs_dim + act_dim; hidden layers ReLU, output positive.
    DensityRatioEstimator(int input_dim, const std::vector<int>& hidden_dims, double temperature,
                          DenominatorMode mode, Rng& rng);

    double temperature() const { return temperature_; }
    DenominatorMode mode() const { return mode_; }
    int input_dim() const { return net_.input_dim(); }
    nn::MlpNetwork& net() { return net_; }
    const nn::MlpNetwork& net() const { return net_; }

    /// w(s,a) > 0 for a batch of concatenated state-action rows.
    Vector ratios(const Matrix& state_action) const;
    double ratio(const Vector& state_action) const;

    struct LossResult {
        double loss = 0.0;       // value of the bound (to be maximized)
        double loss_gan = 0.0;   // same objective via the GAN form
        nn::GradientBatch grads; // gradient of `loss` w.r.t. the network
        Vector denom_ratios;     // w on the denominator batch, reusable as
                                 // the self-normalization reference
    };
    /// Bound value and ascent gradients for one (online, denominator) batch
    /// pair. For DenominatorMode::Union the caller supplies a batch drawn
    /// from offline + online storage.
    LossResult loss_and_grads(const Matrix& online_sa, const Matrix& denom_sa) const;

    /// One Adam step in the ascent direction of the bound.
    void ascent_step(const LossResult& result, double lr);

    /// Tempered self-normalization: w_tilde = w^(1/T) / mean_ref(w^(1/T)),
    /// with the reference drawn from the offline buffer.
    Vector self_normalize(const Vector& raw_ratios, const Vector& offline_reference) const;

    /// Pointwise pieces of the two algebraic forms, exposed for identity
    /// checks: per-sample contribution of the numerator/denominator terms.
    static double f_prime(double w);                // log(2w / (w+1))
    static double f_star_of_f_prime(double w);      // log((w+1) / 2)
    static double gan_numerator(double w);          // log(w/(w+1)) + log 2
    static double gan_denominator(double w);        // log(1/(w+1)) + log 2

    void save(std::ostream& os) const;
    static DensityRatioEstimator load(std::istream& is);

private:
    nn::MlpNetwork net_;
    double temperature_ = 1.0;
    DenominatorMode mode_ = DenominatorMode::Offline;
};

}  // namespace off2on

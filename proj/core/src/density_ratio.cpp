#include "off2on/density_ratio.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "off2on/errors.hpp"
#include "off2on/serialize.hpp"

namespace off2on {

namespace {
constexpr char kMagic[4] = {'O', '2', 'D', 'R'};
constexpr std::uint32_t kFormatVersion = 1;
}  // namespace

const char* denominator_mode_name(DenominatorMode mode) {
    return mode == DenominatorMode::Offline ? "offline" : "union";
}

DenominatorMode denominator_mode_from_name(std::string_view name) {
    if (name == "offline") return DenominatorMode::Offline;
    if (name == "union") return DenominatorMode::Union;
    throw ConfigError("unknown denominator mode: " + std::string(name));
}

DensityRatioEstimator::DensityRatioEstimator(int input_dim, const std::vector<int>& hidden_dims,
                                             double temperature, DenominatorMode mode, Rng& rng)
    : temperature_(temperature), mode_(mode) {
    if (!(temperature > 0.0)) throw ContractViolation("DensityRatioEstimator: temperature must be > 0");
    std::vector<int> dims;
    dims.push_back(input_dim);
    dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
    dims.push_back(1);
    net_ = nn::MlpNetwork(dims, nn::OutputHead::Nonneg, rng);
}

Vector DensityRatioEstimator::ratios(const Matrix& state_action) const {
    return net_.forward(state_action).col(0);
}

double DensityRatioEstimator::ratio(const Vector& state_action) const {
    return net_.forward(state_action)(0);
}

double DensityRatioEstimator::f_prime(double w) { return std::log(2.0 * w) - std::log(w + 1.0); }

double DensityRatioEstimator::f_star_of_f_prime(double w) { return std::log((w + 1.0) / 2.0); }

double DensityRatioEstimator::gan_numerator(double w) {
    return std::log(w) - std::log1p(w) + M_LN2;
}

double DensityRatioEstimator::gan_denominator(double w) { return -std::log1p(w) + M_LN2; }

DensityRatioEstimator::LossResult DensityRatioEstimator::loss_and_grads(const Matrix& online_sa,
                                                                        const Matrix& denom_sa) const {
    if (online_sa.rows() == 0 || denom_sa.rows() == 0)
        throw ContractViolation("dr loss: batches must be nonempty");
    const auto b_on = online_sa.rows();
    const auto b_dn = denom_sa.rows();

    Matrix stacked(b_on + b_dn, online_sa.cols());
    stacked.topRows(b_on) = online_sa;
    stacked.bottomRows(b_dn) = denom_sa;

    nn::ForwardCache cache;
    const Vector w = net_.forward(stacked, &cache).col(0);

    LossResult out;
    out.denom_ratios = w.tail(b_dn);
    Matrix upstream = Matrix::Zero(b_on + b_dn, 1);
    double loss = 0.0, gan = 0.0;
    for (Eigen::Index i = 0; i < b_on; ++i) {
        const double wi = w(i);
        if (!(wi > 0.0)) throw ContractViolation("dr loss: ratio must be positive");
        loss += f_prime(wi) / static_cast<double>(b_on);
        gan += gan_numerator(wi) / static_cast<double>(b_on);
        // d f'(w) / dw = 1 / (w (w + 1))
        upstream(i, 0) = 1.0 / (wi * (wi + 1.0)) / static_cast<double>(b_on);
    }
    for (Eigen::Index j = 0; j < b_dn; ++j) {
        const double wj = w(b_on + j);
        if (!(wj > 0.0)) throw ContractViolation("dr loss: ratio must be positive");
        loss -= f_star_of_f_prime(wj) / static_cast<double>(b_dn);
        gan += gan_denominator(wj) / static_cast<double>(b_dn);
        // d f*(f'(w)) / dw = 1 / (w + 1)
        upstream(b_on + j, 0) = -1.0 / (wj + 1.0) / static_cast<double>(b_dn);
    }
    out.loss = loss;
    out.loss_gan = gan;
    out.grads = net_.backward(cache, upstream);
    return out;
}

void DensityRatioEstimator::ascent_step(const LossResult& result, double lr) {
    nn::GradientBatch descent = result.grads;
    descent.scale(-1.0);
    net_.adam_step(descent, lr);
}

Vector DensityRatioEstimator::self_normalize(const Vector& raw_ratios,
                                             const Vector& offline_reference) const {
    if (offline_reference.size() == 0)
        throw ContractViolation("self_normalize: reference batch must be nonempty");
    const double inv_t = 1.0 / temperature_;
    double norm = 0.0;
    for (Eigen::Index j = 0; j < offline_reference.size(); ++j) {
        if (!(offline_reference(j) > 0.0))
            throw ContractViolation("self_normalize: ratios must be positive");
        norm += std::pow(offline_reference(j), inv_t);
    }
    norm /= static_cast<double>(offline_reference.size());
    Vector out(raw_ratios.size());
    for (Eigen::Index i = 0; i < raw_ratios.size(); ++i) {
        if (!(raw_ratios(i) > 0.0))
            throw ContractViolation("self_normalize: ratios must be positive");
        out(i) = std::pow(raw_ratios(i), inv_t) / norm;
    }
    return out;
}

void DensityRatioEstimator::save(std::ostream& os) const {
    os.write(kMagic, 4);
    io::write_pod<std::uint32_t>(os, kFormatVersion);
    io::write_f64(os, temperature_);
    io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(mode_));
    net_.save(os);
}

DensityRatioEstimator DensityRatioEstimator::load(std::istream& is) {
    io::expect_magic(is, kMagic, "density-ratio checkpoint");
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kFormatVersion)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader,
                              "density-ratio checkpoint: unsupported version");
    DensityRatioEstimator est;
    est.temperature_ = io::read_f64(is);
    const auto mode_byte = io::read_pod<std::uint8_t>(is);
    if (mode_byte > 1)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader,
                              "density-ratio checkpoint: invalid mode");
    est.mode_ = static_cast<DenominatorMode>(mode_byte);
    est.net_ = nn::MlpNetwork::load(is);
    return est;
}

}  // namespace off2on

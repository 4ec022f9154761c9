#include "off2on/nn.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "off2on/errors.hpp"
#include "off2on/serialize.hpp"

namespace off2on::nn {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr char kMagic[4] = {'O', '2', 'N', 'N'};
constexpr std::uint32_t kFormatVersion = 1;

}  // namespace

double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double log_one_minus_tanh_sq(double u) {
    // log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u))
    return 2.0 * (M_LN2 - u - softplus(-2.0 * u));
}

void GradientBatch::set_zero() {
    for (auto& layer : layers) {
        layer.w.setZero();
        layer.b.setZero();
    }
    input.setZero();
}

GradientBatch& GradientBatch::operator+=(const GradientBatch& other) {
    if (layers.size() != other.layers.size())
        throw ContractViolation("GradientBatch += : layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        layers[l].w += other.layers[l].w;
        layers[l].b += other.layers[l].b;
    }
    if (other.input.size() > 0) {
        if (input.size() == 0)
            input = other.input;
        else
            input += other.input;
    }
    return *this;
}

GradientBatch& GradientBatch::scale(double factor) {
    for (auto& layer : layers) {
        layer.w *= factor;
        layer.b *= factor;
    }
    if (input.size() > 0) input *= factor;
    return *this;
}

bool GradientBatch::all_finite() const {
    for (const auto& layer : layers) {
        if (!layer.w.allFinite() || !layer.b.allFinite()) return false;
    }
    return true;
}

MlpNetwork::MlpNetwork(std::vector<int> layer_dims, OutputHead head, Rng& rng)
    : layer_dims_(std::move(layer_dims)), head_(head) {
    if (layer_dims_.size() < 2) throw ContractViolation("MlpNetwork: need at least input and output dims");
    for (int d : layer_dims_) {
        if (d <= 0) throw ContractViolation("MlpNetwork: layer dims must be positive");
    }
    const std::size_t n_layers = layer_dims_.size() - 1;
    weights_.resize(n_layers);
    biases_.resize(n_layers);
    adam_m_w_.resize(n_layers);
    adam_v_w_.resize(n_layers);
    adam_m_b_.resize(n_layers);
    adam_v_b_.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        const int fan_in = layer_dims_[l];
        const int fan_out = layer_dims_[l + 1];
        const bool last = (l + 1 == n_layers);
        const double bound = last ? 3e-3 : std::sqrt(6.0 / fan_in);
        weights_[l].resize(fan_in, fan_out);
        for (int i = 0; i < fan_in; ++i)
            for (int j = 0; j < fan_out; ++j) weights_[l](i, j) = rng.uniform(-bound, bound);
        biases_[l] = Vector::Zero(fan_out);
        adam_m_w_[l] = Matrix::Zero(fan_in, fan_out);
        adam_v_w_[l] = Matrix::Zero(fan_in, fan_out);
        adam_m_b_[l] = Vector::Zero(fan_out);
        adam_v_b_[l] = Vector::Zero(fan_out);
    }
}

void MlpNetwork::check_input(const Matrix& input) const {
    if (input.cols() != input_dim())
        throw ContractViolation("MlpNetwork: input has " + std::to_string(input.cols()) +
                                " columns, expected " + std::to_string(input_dim()));
}

Matrix MlpNetwork::run_layers(const Matrix& input, ForwardCache* cache) const {
    check_input(input);
    if (cache) {
        cache->valid = true;
        cache->input = input;
        cache->hidden.clear();
        cache->hidden.reserve(weights_.size() - 1);
    }
    Matrix a = input;
    for (std::size_t l = 0; l + 1 < weights_.size(); ++l) {
        Matrix z = (a * weights_[l]).rowwise() + biases_[l].transpose();
        a = z.cwiseMax(0.0);
        if (cache) cache->hidden.push_back(a);
    }
    Matrix raw = (a * weights_.back()).rowwise() + biases_.back().transpose();
    if (cache) cache->raw = raw;
    return raw;
}

Matrix MlpNetwork::forward(const Matrix& input, ForwardCache* cache) const {
    Matrix raw = run_layers(input, cache);
    switch (head_) {
        case OutputHead::Linear:
            return raw;
        case OutputHead::Nonneg:
            return raw.unaryExpr([](double x) { return softplus(x) + kNonnegEps; });
        case OutputHead::Gaussian:
            throw ContractViolation("MlpNetwork::forward: use forward_gaussian for Gaussian head");
    }
    return raw;
}

void MlpNetwork::forward_gaussian(const Matrix& input, Matrix* mean, Matrix* log_std,
                                  ForwardCache* cache) const {
    if (head_ != OutputHead::Gaussian)
        throw ContractViolation("MlpNetwork::forward_gaussian: head is not Gaussian");
    if (raw_output_dim() % 2 != 0)
        throw ContractViolation("MlpNetwork: Gaussian head needs an even raw output dim");
    Matrix raw = run_layers(input, cache);
    const int act = raw_output_dim() / 2;
    if (mean) *mean = raw.leftCols(act);
    if (log_std)
        *log_std = raw.rightCols(act).unaryExpr(
            [](double x) { return std::min(kLogStdMax, std::max(kLogStdMin, x)); });
}

Vector MlpNetwork::forward(const Vector& input) const {
    Matrix out = forward(Matrix(input.transpose()));
    return out.row(0).transpose();
}

std::pair<Vector, Vector> MlpNetwork::forward_gaussian(const Vector& input) const {
    Matrix mean, log_std;
    forward_gaussian(Matrix(input.transpose()), &mean, &log_std);
    return {mean.row(0).transpose(), log_std.row(0).transpose()};
}

GradientBatch MlpNetwork::backward(const ForwardCache& cache, const Matrix& upstream,
                                   bool want_input_grads) const {
    if (!cache.valid) throw ContractViolation("MlpNetwork::backward: forward cache missing");
    if (cache.input.cols() != input_dim() || cache.raw.rows() != cache.input.rows())
        throw ContractViolation("MlpNetwork::backward: cache does not match this network");

    const int batch = static_cast<int>(cache.input.rows());
    Matrix d_raw;
    switch (head_) {
        case OutputHead::Linear: {
            if (upstream.rows() != batch || upstream.cols() != raw_output_dim())
                throw ContractViolation("backward: upstream shape mismatch");
            d_raw = upstream;
            break;
        }
        case OutputHead::Nonneg: {
            if (upstream.rows() != batch || upstream.cols() != raw_output_dim())
                throw ContractViolation("backward: upstream shape mismatch");
            // d softplus(x) = sigmoid(x)
            Matrix sig = cache.raw.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
            d_raw = upstream.cwiseProduct(sig);
            break;
        }
        case OutputHead::Gaussian: {
            const int act = raw_output_dim() / 2;
            if (upstream.rows() != batch || upstream.cols() != 2 * act)
                throw ContractViolation("backward: upstream shape mismatch (want [d_mean | d_log_std])");
            d_raw.resize(batch, 2 * act);
            d_raw.leftCols(act) = upstream.leftCols(act);
            // Clamp on log-std kills the gradient outside (min, max).
            Matrix mask = cache.raw.rightCols(act).unaryExpr(
                [](double x) { return (x > kLogStdMin && x < kLogStdMax) ? 1.0 : 0.0; });
            d_raw.rightCols(act) = upstream.rightCols(act).cwiseProduct(mask);
            break;
        }
    }

    GradientBatch grads;
    grads.layers.resize(weights_.size());
    Matrix delta = d_raw;
    for (std::size_t l = weights_.size(); l-- > 0;) {
        const Matrix& below = (l == 0) ? cache.input : cache.hidden[l - 1];
        grads.layers[l].w.noalias() = below.transpose() * delta;
        grads.layers[l].b = delta.colwise().sum().transpose();
        if (l == 0 && !want_input_grads) break;
        Matrix d_below = delta * weights_[l].transpose();
        if (l == 0) {
            grads.input = std::move(d_below);
        } else {
            // ReLU mask from the stored post-activation.
            delta = d_below.cwiseProduct(
                cache.hidden[l - 1].unaryExpr([](double a) { return a > 0.0 ? 1.0 : 0.0; }));
        }
    }
    return grads;
}

GradientBatch MlpNetwork::zero_grads() const {
    GradientBatch grads;
    grads.layers.resize(weights_.size());
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        grads.layers[l].w = Matrix::Zero(weights_[l].rows(), weights_[l].cols());
        grads.layers[l].b = Vector::Zero(biases_[l].size());
    }
    return grads;
}

void MlpNetwork::adam_step(const GradientBatch& grads, double lr) {
    if (grads.layers.size() != weights_.size())
        throw ContractViolation("adam_step: gradient batch not shape-congruent");
    if (!grads.all_finite()) throw TrainingDivergence("adam_step: non-finite gradients");

    ++adam_t_;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(adam_t_));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(adam_t_));
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        const auto& gw = grads.layers[l].w;
        const auto& gb = grads.layers[l].b;
        if (gw.rows() != weights_[l].rows() || gw.cols() != weights_[l].cols() ||
            gb.size() != biases_[l].size())
            throw ContractViolation("adam_step: gradient batch not shape-congruent");
        adam_m_w_[l] = kAdamBeta1 * adam_m_w_[l] + (1.0 - kAdamBeta1) * gw;
        adam_v_w_[l] = kAdamBeta2 * adam_v_w_[l] + (1.0 - kAdamBeta2) * gw.cwiseProduct(gw);
        adam_m_b_[l] = kAdamBeta1 * adam_m_b_[l] + (1.0 - kAdamBeta1) * gb;
        adam_v_b_[l] = kAdamBeta2 * adam_v_b_[l] + (1.0 - kAdamBeta2) * gb.cwiseProduct(gb);
        Matrix denom_w = (adam_v_w_[l] / bc2).cwiseSqrt();
        denom_w.array() += kAdamEps;
        weights_[l] -= (lr / bc1) * adam_m_w_[l].cwiseQuotient(denom_w);
        Vector denom_b = (adam_v_b_[l] / bc2).cwiseSqrt();
        denom_b.array() += kAdamEps;
        biases_[l] -= (lr / bc1) * adam_m_b_[l].cwiseQuotient(denom_b);
    }
}

void MlpNetwork::polyak_from(const MlpNetwork& live, double tau) {
    if (!congruent_with(live)) throw ContractViolation("polyak_from: networks not shape-congruent");
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        weights_[l] = (1.0 - tau) * weights_[l] + tau * live.weights_[l];
        biases_[l] = (1.0 - tau) * biases_[l] + tau * live.biases_[l];
    }
}

bool MlpNetwork::congruent_with(const MlpNetwork& other) const {
    return layer_dims_ == other.layer_dims_ && head_ == other.head_;
}

std::size_t MlpNetwork::param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l)
        n += static_cast<std::size_t>(weights_[l].size()) + biases_[l].size();
    return n;
}

std::vector<double> MlpNetwork::flat_params() const {
    std::vector<double> flat;
    flat.reserve(param_count());
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        for (int i = 0; i < weights_[l].rows(); ++i)
            for (int j = 0; j < weights_[l].cols(); ++j) flat.push_back(weights_[l](i, j));
        for (int j = 0; j < biases_[l].size(); ++j) flat.push_back(biases_[l](j));
    }
    return flat;
}

void MlpNetwork::set_flat_params(const std::vector<double>& flat) {
    if (flat.size() != param_count())
        throw ContractViolation("set_flat_params: wrong parameter count");
    std::size_t k = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        for (int i = 0; i < weights_[l].rows(); ++i)
            for (int j = 0; j < weights_[l].cols(); ++j) weights_[l](i, j) = flat[k++];
        for (int j = 0; j < biases_[l].size(); ++j) biases_[l](j) = flat[k++];
    }
}

void MlpNetwork::save(std::ostream& os) const {
    os.write(kMagic, 4);
    io::write_pod<std::uint32_t>(os, kFormatVersion);
    io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(head_));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(layer_dims_.size()));
    for (int d : layer_dims_) io::write_pod<std::int32_t>(os, d);
    io::write_pod<std::int64_t>(os, adam_t_);
    auto write_mat = [&os](const Matrix& m) { io::write_f64_span(os, m.data(), m.size()); };
    auto write_vec = [&os](const Vector& v) { io::write_f64_span(os, v.data(), v.size()); };
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        write_mat(weights_[l]);
        write_vec(biases_[l]);
        write_mat(adam_m_w_[l]);
        write_mat(adam_v_w_[l]);
        write_vec(adam_m_b_[l]);
        write_vec(adam_v_b_[l]);
    }
}

MlpNetwork MlpNetwork::load(std::istream& is) {
    io::expect_magic(is, kMagic, "network checkpoint");
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kFormatVersion)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader,
                              "network checkpoint: unsupported version " + std::to_string(version));
    const auto head_byte = io::read_pod<std::uint8_t>(is);
    if (head_byte > 2)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader,
                              "network checkpoint: invalid head tag");
    const auto n_dims = io::read_pod<std::uint32_t>(is);
    if (n_dims < 2 || n_dims > 64)
        throw DataFormatError(DataFormatError::Kind::CorruptHeader,
                              "network checkpoint: layer count out of range");
    MlpNetwork net;
    net.head_ = static_cast<OutputHead>(head_byte);
    net.layer_dims_.resize(n_dims);
    for (auto& d : net.layer_dims_) {
        d = io::read_pod<std::int32_t>(is);
        if (d <= 0 || d > (1 << 20))
            throw DataFormatError(DataFormatError::Kind::CorruptHeader,
                                  "network checkpoint: dim out of range");
    }
    net.adam_t_ = io::read_pod<std::int64_t>(is);
    const std::size_t n_layers = n_dims - 1;
    net.weights_.resize(n_layers);
    net.biases_.resize(n_layers);
    net.adam_m_w_.resize(n_layers);
    net.adam_v_w_.resize(n_layers);
    net.adam_m_b_.resize(n_layers);
    net.adam_v_b_.resize(n_layers);
    auto read_mat = [&is](Matrix& m, int r, int c) {
        m.resize(r, c);
        io::read_f64_span(is, m.data(), m.size());
    };
    auto read_vec = [&is](Vector& v, int n) {
        v.resize(n);
        io::read_f64_span(is, v.data(), v.size());
    };
    for (std::size_t l = 0; l < n_layers; ++l) {
        const int r = net.layer_dims_[l];
        const int c = net.layer_dims_[l + 1];
        read_mat(net.weights_[l], r, c);
        read_vec(net.biases_[l], c);
        read_mat(net.adam_m_w_[l], r, c);
        read_mat(net.adam_v_w_[l], r, c);
        read_vec(net.adam_m_b_[l], c);
        read_vec(net.adam_v_b_[l], c);
    }
    return net;
}

SquashedSample gaussian_sample(const Matrix& mean, const Matrix& log_std, const Matrix& noise) {
    if (mean.rows() != log_std.rows() || mean.cols() != log_std.cols() ||
        mean.rows() != noise.rows() || mean.cols() != noise.cols())
        throw ContractViolation("gaussian_sample: shape mismatch");
    SquashedSample out;
    const Matrix std = log_std.array().exp().matrix();
    out.pre_squash = mean + std.cwiseProduct(noise);
    out.action = out.pre_squash.array().tanh().matrix();
    out.log_prob = Vector::Zero(mean.rows());
    constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * log(2*pi)
    for (int i = 0; i < mean.rows(); ++i) {
        double lp = 0.0;
        for (int j = 0; j < mean.cols(); ++j) {
            lp += -0.5 * noise(i, j) * noise(i, j) - kHalfLog2Pi - log_std(i, j);
            lp -= log_one_minus_tanh_sq(out.pre_squash(i, j));
        }
        out.log_prob(i) = lp;
    }
    return out;
}

Vector gaussian_log_prob(const Matrix& mean, const Matrix& log_std, const Matrix& action) {
    if (mean.rows() != action.rows() || mean.cols() != action.cols())
        throw ContractViolation("gaussian_log_prob: shape mismatch");
    constexpr double kHalfLog2Pi = 0.9189385332046727;
    constexpr double kEdge = 1.0 - 1e-9;
    Vector lp = Vector::Zero(mean.rows());
    for (int i = 0; i < mean.rows(); ++i) {
        double acc = 0.0;
        for (int j = 0; j < mean.cols(); ++j) {
            const double a = std::min(kEdge, std::max(-kEdge, action(i, j)));
            const double u = std::atanh(a);
            const double sd = std::exp(log_std(i, j));
            const double z = (u - mean(i, j)) / sd;
            acc += -0.5 * z * z - kHalfLog2Pi - log_std(i, j);
            acc -= log_one_minus_tanh_sq(u);
        }
        lp(i) = acc;
    }
    return lp;
}

}  // namespace off2on::nn

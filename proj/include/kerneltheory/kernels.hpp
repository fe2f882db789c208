#pragma once

#include "kerneltheory/common.hpp"
#include "kerneltheory/rng.hpp"

#include <string_view>

namespace kt {

enum class Activation { linear, erf, relu };

// Input-layer weight variance: sigma_w^2 / patch_size (fan_in) or sigma_w^2 (unit).
enum class InputScaling { fan_in, unit };

inline Activation parse_activation(std::string_view s) {
    if (s == "linear") return Activation::linear;
    if (s == "erf") return Activation::erf;
    if (s == "relu") return Activation::relu;
    throw InvalidArgument("unknown activation '" + std::string(s) + "'");
}

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::linear: return "linear";
        case Activation::erf: return "erf";
        case Activation::relu: return "relu";
    }
    return "?";
}

inline bool is_odd(Activation a) { return a == Activation::linear || a == Activation::erf; }

inline double activate(Activation a, double z) {
    switch (a) {
        case Activation::linear: return z;
        case Activation::erf: return std::erf(z);
        case Activation::relu: return z > 0 ? z : 0.0;
    }
    return z;
}

inline double activate_derivative(Activation a, double z) {
    switch (a) {
        case Activation::linear: return 1.0;
        case Activation::erf: return 2.0 / std::sqrt(std::numbers::pi) * std::exp(-z * z);
        case Activation::relu: return z > 0 ? 1.0 : 0.0;
    }
    return 1.0;
}

// Fully connected (patch_count = 1) or non-overlapping-patch convolutional network.
// Readout weights have variance readout_var / (output_scale * patch_count * channels).
struct NetworkSpec {
    int depth = 2;
    int input_dim = 1;
    int patch_count = 1;
    int patch_size = 1;
    Activation activation = Activation::erf;
    double weight_var = 1.0;
    double readout_var = 1.0;
    double output_scale = 1.0;
    int channels = 1;
    double bias_var = 0.0;
    InputScaling input_scaling = InputScaling::fan_in;

    static NetworkSpec fcn(int d, Activation act, int depth = 2) {
        NetworkSpec s;
        s.depth = depth;
        s.input_dim = d;
        s.patch_size = d;
        s.activation = act;
        return s;
    }

    static NetworkSpec cnn(int patch_count, int patch_size, Activation act) {
        NetworkSpec s;
        s.input_dim = patch_count * patch_size;
        s.patch_count = patch_count;
        s.patch_size = patch_size;
        s.activation = act;
        return s;
    }

    void validate() const {
        require(depth >= 1, "network: depth must be >= 1");
        require(input_dim >= 1 && patch_count >= 1 && patch_size >= 1, "network: sizes must be positive");
        require(patch_count * patch_size == input_dim, "network: patch_count * patch_size must equal input_dim");
        require(weight_var > 0 && readout_var > 0 && output_scale > 0, "network: variances and output_scale must be positive");
        require(bias_var >= 0, "network: bias_var must be non-negative");
        require(channels >= 1, "network: channels must be >= 1");
    }

    double fan() const { return input_scaling == InputScaling::fan_in ? static_cast<double>(patch_size) : 1.0; }
    double output_factor() const { return readout_var / output_scale; }
};

namespace detail {

inline double clamp_unit(double v) {
    constexpr double tol = 1e-12;
    if (v > 1.0 + tol || v < -1.0 - tol) throw NumericalError("arcsine/arccosine argument outside [-1, 1]");
    return std::clamp(v, -1.0, 1.0);
}

inline void check_points(const Matrix& X, const NetworkSpec& spec) {
    require(X.cols() == spec.input_dim, "point matrix has " + std::to_string(X.cols()) +
                                            " columns, network expects " + std::to_string(spec.input_dim));
    require(X.allFinite(), "point matrix contains non-finite values");
}

}  // namespace detail

// E[s(u) s(v)] for (u, v) centred Gaussian with Var u = kxx, Var v = kyy, Cov = kxy.
inline double gaussian_activation_moment(Activation a, double kxx, double kyy, double kxy) {
    switch (a) {
        case Activation::linear: return kxy;
        case Activation::erf: {
            const double arg = 2.0 * kxy / std::sqrt((1.0 + 2.0 * kxx) * (1.0 + 2.0 * kyy));
            return 2.0 / std::numbers::pi * std::asin(detail::clamp_unit(arg));
        }
        case Activation::relu: {
            if (kxx <= 0 || kyy <= 0) return 0.0;
            const double norm = std::sqrt(kxx * kyy);
            const double c = detail::clamp_unit(kxy / norm);
            const double th = std::acos(c);
            return norm / (2.0 * std::numbers::pi) * (std::sin(th) + (std::numbers::pi - th) * c);
        }
    }
    return 0.0;
}

// E[s'(u) s'(v)] for the same Gaussian pair.
inline double gaussian_derivative_moment(Activation a, double kxx, double kyy, double kxy) {
    switch (a) {
        case Activation::linear: return 1.0;
        case Activation::erf: {
            const double det = (1.0 + 2.0 * kxx) * (1.0 + 2.0 * kyy) - 4.0 * kxy * kxy;
            if (det <= 0) throw NumericalError("erf derivative kernel: singular covariance");
            return 4.0 / std::numbers::pi / std::sqrt(det);
        }
        case Activation::relu: {
            if (kxx <= 0 || kyy <= 0) return 0.0;
            const double c = detail::clamp_unit(kxy / std::sqrt(kxx * kyy));
            return (std::numbers::pi - std::acos(c)) / (2.0 * std::numbers::pi);
        }
    }
    return 0.0;
}

// Per-patch input overlaps x_i . y_i / fan, one matrix per patch.
inline std::vector<Matrix> patch_overlaps(const NetworkSpec& spec, const Matrix& X, const Matrix& Y) {
    std::vector<Matrix> out;
    out.reserve(static_cast<std::size_t>(spec.patch_count));
    const double inv_fan = 1.0 / spec.fan();
    for (int i = 0; i < spec.patch_count; ++i) {
        const auto xs = X.middleCols(i * spec.patch_size, spec.patch_size);
        const auto ys = Y.middleCols(i * spec.patch_size, spec.patch_size);
        out.push_back(inv_fan * xs * ys.transpose());
    }
    return out;
}

namespace detail {

// Preactivation covariances of the last hidden layer for each patch, as
// (cross, diag_x, diag_y). Patches are propagated independently.
struct LayerCov {
    Matrix cross;
    Vector xx;
    Vector yy;
};

inline LayerCov apply_moment(Activation a, const LayerCov& in) {
    LayerCov out{Matrix(in.cross.rows(), in.cross.cols()), Vector(in.xx.size()), Vector(in.yy.size())};
    for (Eigen::Index r = 0; r < in.cross.rows(); ++r)
        for (Eigen::Index c = 0; c < in.cross.cols(); ++c)
            out.cross(r, c) = gaussian_activation_moment(a, in.xx(r), in.yy(c), in.cross(r, c));
    for (Eigen::Index r = 0; r < in.xx.size(); ++r) out.xx(r) = gaussian_activation_moment(a, in.xx(r), in.xx(r), in.xx(r));
    for (Eigen::Index c = 0; c < in.yy.size(); ++c) out.yy(c) = gaussian_activation_moment(a, in.yy(c), in.yy(c), in.yy(c));
    return out;
}

inline std::vector<LayerCov> first_layer(const NetworkSpec& spec, const Matrix& X, const Matrix& Y) {
    std::vector<LayerCov> covs;
    const double inv_fan = 1.0 / spec.fan();
    for (int i = 0; i < spec.patch_count; ++i) {
        const auto xs = X.middleCols(i * spec.patch_size, spec.patch_size);
        const auto ys = Y.middleCols(i * spec.patch_size, spec.patch_size);
        LayerCov c;
        c.cross = (spec.weight_var * inv_fan) * (xs * ys.transpose()).array() + spec.bias_var;
        c.xx = (spec.weight_var * inv_fan) * xs.rowwise().squaredNorm().array() + spec.bias_var;
        c.yy = (spec.weight_var * inv_fan) * ys.rowwise().squaredNorm().array() + spec.bias_var;
        covs.push_back(std::move(c));
    }
    return covs;
}

// Covariances entering the readout layer (after depth-2 hidden recursions).
inline std::vector<LayerCov> readout_inputs(const NetworkSpec& spec, const Matrix& X, const Matrix& Y) {
    auto covs = first_layer(spec, X, Y);
    for (int l = 2; l < spec.depth; ++l) {
        for (auto& c : covs) {
            auto next = apply_moment(spec.activation, c);
            next.cross = spec.weight_var * next.cross.array() + spec.bias_var;
            next.xx = spec.weight_var * next.xx.array() + spec.bias_var;
            next.yy = spec.weight_var * next.yy.array() + spec.bias_var;
            c = std::move(next);
        }
    }
    return covs;
}

}  // namespace detail

// NNGP kernel between two point sets.
inline Matrix nngp_cross_kernel(const NetworkSpec& spec, const Matrix& X, const Matrix& Y) {
    spec.validate();
    detail::check_points(X, spec);
    detail::check_points(Y, spec);
    Matrix K = Matrix::Zero(X.rows(), Y.rows());
    if (spec.depth == 1) {
        for (const auto& o : patch_overlaps(spec, X, Y)) K += o;
    } else {
        for (const auto& c : detail::readout_inputs(spec, X, Y))
            K += detail::apply_moment(spec.activation, c).cross;
    }
    return (spec.output_factor() / spec.patch_count) * K;
}

inline Matrix nngp_kernel(const NetworkSpec& spec, const Matrix& X) {
    return symmetrize(nngp_cross_kernel(spec, X, X));
}

// Derivative contribution Phi' (.) K^x of the two-layer NTK between two point sets.
inline Matrix ntk_derivative_term(const NetworkSpec& spec, const Matrix& X, const Matrix& Y) {
    spec.validate();
    require(spec.depth == 2, "ntk_kernel_2layer requires depth 2");
    detail::check_points(X, spec);
    detail::check_points(Y, spec);
    Matrix T = Matrix::Zero(X.rows(), Y.rows());
    for (const auto& c : detail::first_layer(spec, X, Y))
        for (Eigen::Index r = 0; r < T.rows(); ++r)
            for (Eigen::Index k = 0; k < T.cols(); ++k)
                T(r, k) += gaussian_derivative_moment(spec.activation, c.xx(r), c.yy(k), c.cross(r, k)) * c.cross(r, k);
    return (spec.output_factor() / spec.patch_count) * T;
}

inline Matrix ntk_cross_kernel_2layer(const NetworkSpec& spec, const Matrix& X, const Matrix& Y) {
    require(spec.depth == 2, "ntk_kernel_2layer requires depth 2");
    return nngp_cross_kernel(spec, X, Y) + ntk_derivative_term(spec, X, Y);
}

inline Matrix ntk_kernel_2layer(const NetworkSpec& spec, const Matrix& X) {
    return symmetrize(ntk_cross_kernel_2layer(spec, X, X));
}

inline bool is_psd(const Matrix& S, double rel_floor = 1e-10) {
    if (S.rows() == 0) return true;
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(S), Eigen::EigenvaluesOnly);
    const double top = std::max(0.0, es.eigenvalues().maxCoeff());
    return es.eigenvalues().minCoeff() >= -rel_floor * std::max(top, 1e-300);
}

// Two-layer Erf kernel with input-weight covariance Sigma (S x S) shared by all patches.
inline Matrix adapted_kernel_erf(const Matrix& Sigma, const Matrix& X) {
    require(Sigma.rows() == Sigma.cols(), "Sigma must be square");
    const auto S = Sigma.rows();
    require(S > 0 && X.cols() % S == 0, "point dimension must be a multiple of Sigma's size");
    require((Sigma - Sigma.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, Sigma.cwiseAbs().maxCoeff()),
            "Sigma must be symmetric");
    require(is_psd(Sigma), "Sigma must be positive semi-definite");
    require(X.allFinite(), "point matrix contains non-finite values");
    const auto nw = X.cols() / S;
    Matrix K = Matrix::Zero(X.rows(), X.rows());
    for (Eigen::Index i = 0; i < nw; ++i) {
        const auto xs = X.middleCols(i * S, S);
        const Matrix cross = xs * Sigma * xs.transpose();
        const Vector diag = cross.diagonal();
        for (Eigen::Index r = 0; r < K.rows(); ++r)
            for (Eigen::Index c = 0; c < K.cols(); ++c)
                K(r, c) += gaussian_activation_moment(Activation::erf, diag(r), diag(c), cross(r, c));
    }
    return symmetrize(K / static_cast<double>(nw));
}

namespace detail {

// Outputs of one randomly drawn network (width = spec.channels) on every row of X.
inline Vector sample_network_outputs(const NetworkSpec& spec, const Matrix& X, CounterRng& rng) {
    const int C = spec.channels;
    const int S = spec.patch_size;
    const double readout_sd = std::sqrt(spec.output_factor() / (spec.patch_count * C));
    const double bias_sd = std::sqrt(spec.bias_var);
    Vector f = Vector::Zero(X.rows());
    if (spec.depth == 1) {
        const Vector a = rng.normal_vector(spec.input_dim, std::sqrt(spec.output_factor() / (spec.patch_count * spec.fan())));
        return X * a;
    }
    const Matrix W1 = rng.normal_matrix(S, C, std::sqrt(spec.weight_var / spec.fan()));
    const Vector b1 = rng.normal_vector(C, bias_sd);
    std::vector<Matrix> hidden;
    std::vector<Vector> hidden_bias;
    for (int l = 2; l < spec.depth; ++l) {
        hidden.push_back(rng.normal_matrix(C, C, std::sqrt(spec.weight_var / C)));
        hidden_bias.push_back(rng.normal_vector(C, bias_sd));
    }
    const Matrix A = rng.normal_matrix(C, spec.patch_count, readout_sd);
    for (int i = 0; i < spec.patch_count; ++i) {
        Matrix h = X.middleCols(i * S, S) * W1;
        h.rowwise() += b1.transpose();
        for (std::size_t l = 0; l < hidden.size(); ++l) {
            h = h.unaryExpr([&](double z) { return activate(spec.activation, z); }).eval() * hidden[l];
            h.rowwise() += hidden_bias[l].transpose();
        }
        f += h.unaryExpr([&](double z) { return activate(spec.activation, z); }) * A.col(i);
    }
    return f;
}

}  // namespace detail

// Second moment of network outputs over `samples` independent weight draws.
// Draws are grouped in fixed blocks, each with its own stream, and block sums are
// reduced in block order, so the result is independent of `threads`.
inline Matrix empirical_kernel_mc(const NetworkSpec& spec, const Matrix& X, std::size_t samples,
                                  std::uint64_t seed, unsigned threads = 1) {
    spec.validate();
    detail::check_points(X, spec);
    require(samples >= 1, "empirical_kernel_mc: samples must be >= 1");
    constexpr std::size_t block = 1024;
    const std::size_t blocks = (samples + block - 1) / block;
    std::vector<Matrix> partial(blocks);
    parallel_for(blocks, threads, [&](std::size_t b) {
        CounterRng rng({seed, 0x6b65726eULL, b});
        const std::size_t lo = b * block;
        const std::size_t hi = std::min(samples, lo + block);
        Matrix F(X.rows(), static_cast<Eigen::Index>(hi - lo));
        for (std::size_t s = lo; s < hi; ++s) F.col(static_cast<Eigen::Index>(s - lo)) = detail::sample_network_outputs(spec, X, rng);
        partial[b] = F * F.transpose();
    });
    Matrix K = Matrix::Zero(X.rows(), X.rows());
    for (const auto& p : partial) K += p;
    return symmetrize(K / static_cast<double>(samples));
}

namespace detail {

inline double wick_recurse(const Vector& mu, const Matrix& Sigma, std::vector<int>& idx) {
    if (idx.empty()) return 1.0;
    const int a = idx.back();
    idx.pop_back();
    double total = 0.0;
    if (mu(a) != 0.0) total += mu(a) * wick_recurse(mu, Sigma, idx);
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const int b = idx[j];
        if (Sigma(a, b) == 0.0) continue;
        std::vector<int> rest;
        rest.reserve(idx.size() - 1);
        for (std::size_t k = 0; k < idx.size(); ++k)
            if (k != j) rest.push_back(idx[k]);
        total += Sigma(a, b) * wick_recurse(mu, Sigma, rest);
    }
    idx.push_back(a);
    return total;
}

}  // namespace detail

inline constexpr std::size_t kMaxWickIndices = 8;

// E[prod_k z_{indices[k]}] for z ~ N(mu, Sigma); indices are zero-based.
inline double wick_moment(const Vector& mu, const Matrix& Sigma, std::span<const int> indices) {
    require(Sigma.rows() == Sigma.cols() && Sigma.rows() == mu.size(), "wick_moment: dimension mismatch");
    require(indices.size() <= kMaxWickIndices, "wick_moment: at most 8 indices supported");
    require(is_psd(Sigma), "wick_moment: Sigma must be positive semi-definite");
    std::vector<int> idx(indices.begin(), indices.end());
    for (int i : idx) require(i >= 0 && i < mu.size(), "wick_moment: index out of range");
    return detail::wick_recurse(mu, Sigma, idx);
}

}  // namespace kt

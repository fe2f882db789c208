#pragma once

#include "kerneltheory/common.hpp"

#include <limits>
#include <numeric>

namespace kt {

struct DataMeasure {
    Matrix points;
    Vector weights;

    static DataMeasure uniform(Matrix pts) {
        const auto n = pts.rows();
        require(n > 0, "measure needs at least one point");
        DataMeasure m{std::move(pts), Vector::Constant(n, 1.0 / static_cast<double>(n))};
        return m;
    }

    Eigen::Index size() const { return weights.size(); }

    void validate() const {
        require(points.rows() == weights.size(), "measure: point/weight count mismatch");
        require((weights.array() >= 0).all(), "measure: weights must be non-negative");
        require(std::abs(weights.sum() - 1.0) <= 1e-12, "measure: weights must sum to 1");
    }
};

struct SpectralDecomposition {
    Vector eigenvalues;      // descending, non-negative
    Matrix eigenfunctions;   // column k is phi_k sampled on the points
    double clipped = 0.0;    // largest magnitude of a negative eigenvalue set to zero
    Eigen::Index clipped_count = 0;
};

namespace detail {

inline void check_weights(const Vector& w) {
    require((w.array() >= 0).all(), "measure: weights must be non-negative");
    require(std::abs(w.sum() - 1.0) <= 1e-12, "measure: weights must sum to 1");
}

}  // namespace detail

// Eigenpairs of f -> sum_nu w_nu K(., x_nu) f(x_nu), normalised so that
// sum_mu w_mu phi_k phi_l = delta_kl.
inline SpectralDecomposition eigendecompose(const Matrix& K, const Vector& weights) {
    require(K.rows() == K.cols(), "eigendecompose: kernel must be square");
    require(K.rows() == weights.size(), "eigendecompose: kernel and measure sizes differ");
    detail::check_weights(weights);
    const auto n = K.rows();
    const Vector sw = weights.array().sqrt();
    const Matrix M = sw.asDiagonal() * symmetrize(K) * sw.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Matrix> es(M);
    if (es.info() != Eigen::Success) throw NumericalError("eigendecompose: eigen-solver failed");

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const Vector& ev = es.eigenvalues();
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ev(a) > ev(b); });

    SpectralDecomposition out;
    out.eigenvalues.resize(n);
    out.eigenfunctions.resize(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const auto src = order[static_cast<std::size_t>(k)];
        double lam = ev(src);
        if (lam < 0) {
            out.clipped = std::max(out.clipped, -lam);
            ++out.clipped_count;
            lam = 0.0;
        }
        Vector u = es.eigenvectors().col(src);
        const double umax = u.cwiseAbs().maxCoeff();
        for (Eigen::Index i = 0; i < n; ++i) {
            if (std::abs(u(i)) > 1e-8 * umax) {
                if (u(i) < 0) u = -u;
                break;
            }
        }
        Vector phi(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (weights(i) > 0) {
                phi(i) = u(i) / sw(i);
            } else {
                phi(i) = lam > 0 ? K.row(i).dot((sw.array() * u.array()).matrix()) / lam : 0.0;
            }
        }
        out.eigenvalues(k) = lam;
        out.eigenfunctions.col(k) = phi;
    }
    return out;
}

inline SpectralDecomposition eigendecompose(const Matrix& K, const DataMeasure& measure) {
    return eigendecompose(K, measure.weights);
}

// y_k = sum_mu w_mu phi_k(x_mu) y(x_mu)
inline Vector target_coefficients(const Vector& y, const SpectralDecomposition& dec, const Vector& weights) {
    require(y.size() == weights.size() && dec.eigenfunctions.rows() == y.size(),
            "target_coefficients: dimension mismatch");
    return dec.eigenfunctions.transpose() * (weights.array() * y.array()).matrix();
}

inline constexpr double kPseudoInverseTol = 1e-12;

// RKHS norm sum_k g_k^2 / lambda_k over the numerical range of K.
inline double rkhs_norm(const Vector& g, const Matrix& K, const Vector& weights) {
    require(g.size() == K.rows(), "rkhs_norm: dimension mismatch");
    const auto dec = eigendecompose(K, weights);
    const Vector gk = target_coefficients(g, dec, weights);
    const double total = (weights.array() * g.array().square()).sum();
    if (total == 0.0) return 0.0;
    const double cut = kPseudoInverseTol * dec.eigenvalues(0);
    double inside = 0.0;
    double norm = 0.0;
    for (Eigen::Index k = 0; k < gk.size(); ++k) {
        if (dec.eigenvalues(k) > cut) {
            inside += gk(k) * gk(k);
            norm += gk(k) * gk(k) / dec.eigenvalues(k);
        }
    }
    const double outside = std::max(0.0, total - inside);
    if (outside > 1e-6 * total)
        throw NumericalError("rkhs_norm: function has " + std::to_string(outside / total) +
                             " of its squared norm outside the kernel's numerical range");
    return norm;
}

inline std::vector<double> powerlaw_spectrum(double alpha, double lambda1, std::size_t count) {
    require(alpha > 0, "powerlaw_spectrum: alpha must be positive");
    require(lambda1 > 0, "powerlaw_spectrum: lambda1 must be positive");
    std::vector<double> out(count);
    for (std::size_t k = 0; k < count; ++k) out[k] = lambda1 * std::pow(static_cast<double>(k + 1), -1.0 - alpha);
    return out;
}

namespace detail {

inline std::uint64_t checked_binomial(std::uint64_t n, std::uint64_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    unsigned __int128 c = 1;
    for (std::uint64_t i = 1; i <= k; ++i) {
        c = c * (n - k + i) / i;
        if (c > std::numeric_limits<std::uint64_t>::max()) throw NumericalError("hypersphere_degeneracy: overflow");
    }
    return static_cast<std::uint64_t>(c);
}

}  // namespace detail

// Dimension of the degree-alpha spherical-harmonic space on S^{d_in - 1}.
inline std::uint64_t hypersphere_degeneracy(std::uint64_t level, std::uint64_t d_in) {
    require(d_in >= 2, "hypersphere_degeneracy: d_in must be >= 2");
    if (level == 0) return 1;
    // ((2a + d - 2) / (a + d - 2)) * C(a + d - 2, a) == C(a + d - 1, a) - C(a + d - 3, a - 2)
    const std::uint64_t hi = detail::checked_binomial(level + d_in - 1, level);
    const std::uint64_t lo = level >= 2 ? detail::checked_binomial(level + d_in - 3, level - 2) : 0;
    return hi - lo;
}

}  // namespace kt

#pragma once

#include "kerneltheory/common.hpp"

#include <span>

namespace kt {

struct LearningCurvePrediction {
    double P = 0.0;
    double kappa2 = 0.0;
    double kappa_eff2 = 0.0;
    double D = 0.0;
    Vector learnability;        // lambda_k / (lambda_k + kappa_eff2 / P)
    Vector mean_mode;           // learnability_k * y_k
    Vector posterior_variance_mode;
    Vector dataset_variance_mode;
    double bias = 0.0;
    double variance = 0.0;            // EK: posterior variance; effective ridge: across-draw variance
    double posterior_variance = 0.0;  // sum of posterior_variance_mode
    double dataset_variance = 0.0;    // sum of dataset_variance_mode
    double loss = 0.0;                // bias + variance
    std::size_t truncated_modes = 0;
    double truncated_tail = 0.0;
};

namespace detail {

inline void check_spectrum(std::span<const double> lambda) {
    require(!lambda.empty(), "spectrum is empty");
    for (double l : lambda) require(std::isfinite(l) && l >= 0, "eigenvalues must be finite and non-negative");
}

inline void check_targets(std::span<const double> lambda, std::span<const double> y) {
    require(y.size() == lambda.size(), "target coefficients and spectrum differ in length");
}

inline double trace(std::span<const double> lambda) {
    double s = 0;
    for (double l : lambda) s += l;
    return s;
}

}  // namespace detail

// Equivalent-kernel prediction at ridge kappa2 > 0.
inline LearningCurvePrediction ek_predict(std::span<const double> lambda, std::span<const double> y, double P,
                                          double kappa2) {
    detail::check_spectrum(lambda);
    detail::check_targets(lambda, y);
    require(P > 0, "ek_predict: P must be positive");
    if (!(kappa2 > 0)) throw InvalidArgument("ek_predict: ridge must be positive; use the effective ridge or RG first");
    const auto m = static_cast<Eigen::Index>(lambda.size());
    LearningCurvePrediction out;
    out.P = P;
    out.kappa2 = kappa2;
    out.kappa_eff2 = kappa2;
    out.learnability.resize(m);
    out.mean_mode.resize(m);
    out.posterior_variance_mode.resize(m);
    out.dataset_variance_mode = Vector::Zero(m);
    const double r = kappa2 / P;
    for (Eigen::Index k = 0; k < m; ++k) {
        const double l = lambda[static_cast<std::size_t>(k)];
        const double yk = y[static_cast<std::size_t>(k)];
        const double L = l / (l + r);
        out.learnability(k) = L;
        out.mean_mode(k) = L * yk;
        out.posterior_variance_mode(k) = r * L;
        out.bias += (1 - L) * (1 - L) * yk * yk;
    }
    out.posterior_variance = out.posterior_variance_mode.sum();
    out.variance = out.posterior_variance;
    out.loss = out.bias + out.variance;
    return out;
}

// EK discrepancy corrected by the leading 1/N term of a deep linear network.
inline double deep_linear_correction_factor(std::span<const double> lambda, std::span<const double> y, double P,
                                            double kappa2, double u1, double N) {
    detail::check_spectrum(lambda);
    detail::check_targets(lambda, y);
    require(N > 0 && P > 0 && kappa2 > 0, "deep linear correction: N, P and ridge must be positive");
    double s = 0;
    for (std::size_t k = 0; k < lambda.size(); ++k) {
        const double d = lambda[k] + kappa2 / P;
        s += y[k] * y[k] * lambda[k] / (d * d);
    }
    return 1.0 + 3.0 * u1 / (6.0 * N) * s;
}

inline double perturbative_ek_correction_deep_linear(double discrepancy, std::span<const double> lambda,
                                                     std::span<const double> y, double P, double kappa2, double u1,
                                                     double N) {
    return discrepancy * deep_linear_correction_factor(lambda, y, P, kappa2, u1, N);
}

struct EffectiveRidge {
    double kappa_eff2 = 0.0;
    double residual = 0.0;  // |k - F(k)| / k
    int iterations = 0;
    bool bisection = false;
    bool all_learnable = false;  // ridgeless with no unlearnable direction: kappa_eff2 = 0
};

namespace detail {

// F(k) = kappa2 + sum_k (P / k + 1 / lambda_k)^{-1}
inline double ridge_map(std::span<const double> lambda, double P, double kappa2, double k) {
    double s = kappa2;
    for (double l : lambda)
        if (l > 0) s += l * k / (P * l + k);
    return s;
}

inline double ridge_ratio(std::span<const double> lambda, double P, double kappa2, double k) {
    double s = kappa2 / k;
    for (double l : lambda)
        if (l > 0) s += l / (P * l + k);
    return s;
}

}  // namespace detail

inline EffectiveRidge effective_ridge_bisect(std::span<const double> lambda, double P, double kappa2) {
    EffectiveRidge out;
    out.bisection = true;
    const double tr = detail::trace(lambda);
    double hi = kappa2 + tr;
    if (hi <= 0) return out;
    // h(k) = 1 - F(k)/k is increasing in k; bracket its root in log space.
    auto h = [&](double k) { return 1.0 - detail::ridge_ratio(lambda, P, kappa2, k); };
    double lo = kappa2 > 0 ? kappa2 : hi * 1e-3;
    while (h(lo) >= 0) {
        if (kappa2 > 0 && lo == kappa2) break;
        lo *= 1e-3;
        if (lo < 1e-300) {
            out.all_learnable = true;
            return out;
        }
    }
    if (h(hi) <= 0) {
        out.kappa_eff2 = hi;
    } else {
        for (int it = 0; it < 400; ++it) {
            const double mid = lo > 0 ? std::sqrt(lo * hi) : 0.5 * (lo + hi);
            if (h(mid) < 0) lo = mid;
            else hi = mid;
            out.iterations = it + 1;
            if (hi - lo <= 1e-16 * hi) break;
        }
        out.kappa_eff2 = 0.5 * (lo + hi);
    }
    const double F = detail::ridge_map(lambda, P, kappa2, out.kappa_eff2);
    out.residual = std::abs(out.kappa_eff2 - F) / out.kappa_eff2;
    return out;
}

// Fixed point of k = kappa2 + sum_k (P/k + 1/lambda_k)^{-1}: damped iteration from
// the all-unlearnable bound kappa2 + Tr, bisection if it stalls.
inline EffectiveRidge effective_ridge_solve(std::span<const double> lambda, double P, double kappa2) {
    detail::check_spectrum(lambda);
    require(P > 0, "effective_ridge_solve: P must be positive");
    require(kappa2 >= 0, "effective_ridge_solve: ridge must be non-negative");
    if (kappa2 == 0) {
        // Ridgeless: a positive root exists only if F(k)/k > 1 as k -> 0, i.e. more
        // non-zero modes than samples.
        const auto modes = std::count_if(lambda.begin(), lambda.end(), [](double l) { return l > 0; });
        if (static_cast<double>(modes) <= P) {
            EffectiveRidge out;
            out.all_learnable = true;
            return out;
        }
    }
    EffectiveRidge out;
    double k = kappa2 + detail::trace(lambda);
    if (k <= 0) {
        out.all_learnable = true;
        return out;
    }
    constexpr int cap = 10000;
    for (int it = 1; it <= cap; ++it) {
        const double F = detail::ridge_map(lambda, P, kappa2, k);
        const double next = 0.5 * k + 0.5 * F;
        out.iterations = it;
        k = next;
        const double res = std::abs(k - detail::ridge_map(lambda, P, kappa2, k)) / k;
        if (res < 1e-13) {
            out.kappa_eff2 = k;
            out.residual = res;
            return out;
        }
    }
    auto b = effective_ridge_bisect(lambda, P, kappa2);
    b.iterations += cap;
    if (b.residual >= 1e-10) throw NumericalError("effective ridge did not converge, residual " + std::to_string(b.residual));
    return b;
}

enum class DiscrepancySource {
    discrepancy,  // sum_k ((kappa_eff2/P) / (lambda_k + kappa_eff2/P) y_k)^2
    mean,         // sum_k (lambda_k / (lambda_k + kappa_eff2/P) y_k)^2
};

inline double d_prefactor(std::span<const double> lambda, double P, double kappa_eff2) {
    double g = 0;
    for (double l : lambda) {
        if (l <= 0) continue;
        const double v = l * kappa_eff2 / (P * l + kappa_eff2);
        g += v * v * P / (kappa_eff2 * kappa_eff2);
    }
    return 1.0 - g;
}

// Across-draw variance amplitude D of the averaged predictor.
inline double solve_D(std::span<const double> lambda, std::span<const double> y, double P, double kappa_eff2,
                      DiscrepancySource source = DiscrepancySource::discrepancy) {
    detail::check_spectrum(lambda);
    detail::check_targets(lambda, y);
    require(P > 0 && kappa_eff2 > 0, "solve_D: P and kappa_eff2 must be positive");
    const double pre = d_prefactor(lambda, P, kappa_eff2);
    if (!(pre > 0)) throw NumericalError("solve_D: non-positive prefactor " + std::to_string(pre));
    double num = 0;
    const double r = kappa_eff2 / P;
    for (std::size_t k = 0; k < lambda.size(); ++k) {
        const double L = lambda[k] / (lambda[k] + r);
        const double c = source == DiscrepancySource::discrepancy ? (1.0 - L) : L;
        num += c * c * y[k] * y[k];
    }
    return num / pre;
}

struct ModeCovariance {
    double posterior = 0.0;  // (P/kappa_eff2 + 1/lambda)^{-1}
    double dataset = 0.0;    // (P/kappa_eff2 + 1/lambda)^{-2} P / kappa_eff2^2 * D
};

inline ModeCovariance mode_covariance(double lambda_k, double P, double kappa_eff2, double D) {
    require(P > 0 && kappa_eff2 > 0, "mode_covariance: P and kappa_eff2 must be positive");
    ModeCovariance out;
    if (lambda_k <= 0) return out;
    const double v = lambda_k * kappa_eff2 / (P * lambda_k + kappa_eff2);
    out.posterior = v;
    out.dataset = v * v * P / (kappa_eff2 * kappa_eff2) * D;
    return out;
}

// Number of leading modes kept after dropping a tail whose sum is below tol * trace.
inline std::size_t truncation_point(std::span<const double> lambda, double tol = 1e-12) {
    const double tr = detail::trace(lambda);
    double tail = 0;
    std::size_t keep = lambda.size();
    while (keep > 1 && tail + lambda[keep - 1] < tol * tr) {
        tail += lambda[keep - 1];
        --keep;
    }
    return keep;
}

namespace detail {

inline LearningCurvePrediction fill_curve(std::span<const double> lambda, std::span<const double> y, double P,
                                          double kappa2, double kappa_eff2, double D, double extra_bias) {
    const auto m = static_cast<Eigen::Index>(lambda.size());
    LearningCurvePrediction out;
    out.P = P;
    out.kappa2 = kappa2;
    out.kappa_eff2 = kappa_eff2;
    out.D = D;
    out.learnability.resize(m);
    out.mean_mode.resize(m);
    out.posterior_variance_mode.resize(m);
    out.dataset_variance_mode.resize(m);
    for (Eigen::Index k = 0; k < m; ++k) {
        const double l = lambda[static_cast<std::size_t>(k)];
        const double yk = y[static_cast<std::size_t>(k)];
        const double L = kappa_eff2 > 0 ? l / (l + kappa_eff2 / P) : (l > 0 ? 1.0 : 0.0);
        out.learnability(k) = L;
        out.mean_mode(k) = L * yk;
        if (kappa_eff2 > 0) {
            const auto mc = mode_covariance(l, P, kappa_eff2, D);
            out.posterior_variance_mode(k) = mc.posterior;
            out.dataset_variance_mode(k) = mc.dataset;
        } else {
            out.posterior_variance_mode(k) = 0;
            out.dataset_variance_mode(k) = 0;
        }
        out.bias += (1 - L) * (1 - L) * yk * yk;
    }
    out.bias += extra_bias;
    out.posterior_variance = out.posterior_variance_mode.sum();
    out.dataset_variance = out.dataset_variance_mode.sum();
    out.variance = out.dataset_variance;
    out.loss = out.bias + out.dataset_variance;
    return out;
}

}  // namespace detail

// Learning-curve prediction from the effective ridge and D.
inline LearningCurvePrediction effective_ridge_predict(std::span<const double> lambda, std::span<const double> y,
                                                       double P, double kappa2,
                                                       DiscrepancySource source = DiscrepancySource::discrepancy) {
    detail::check_spectrum(lambda);
    detail::check_targets(lambda, y);
    const std::size_t keep = truncation_point(lambda);
    const auto lam = lambda.first(keep);
    const auto yk = y.first(keep);
    double dropped_y2 = 0, dropped_tail = 0;
    for (std::size_t k = keep; k < lambda.size(); ++k) {
        dropped_y2 += y[k] * y[k];
        dropped_tail += lambda[k];
    }
    const auto er = effective_ridge_solve(lam, P, kappa2 + dropped_tail);
    double D = 0;
    if (!er.all_learnable) {
        D = solve_D(lam, yk, P, er.kappa_eff2, source);
        if (source == DiscrepancySource::discrepancy) D += dropped_y2 / d_prefactor(lam, P, er.kappa_eff2);
    }
    auto out = detail::fill_curve(lam, yk, P, kappa2, er.kappa_eff2, D, dropped_y2);
    out.truncated_modes = lambda.size() - keep;
    out.truncated_tail = dropped_tail;
    return out;
}

struct RGFlowResult {
    double kappa_rg2 = 0.0;
    std::size_t cutoff = 0;  // Lambda': number of modes kept (modes cutoff+1..m integrated out)
    double epsilon = 0.01;
    std::vector<std::pair<std::size_t, double>> trajectory;  // (Lambda, kappa2_{RG,Lambda})
    std::vector<double> absorbed_y2;                         // cumulative y^2 of integrated modes
};

// Integrates modes out from the tail. Mode j (1-based) is unlearnable when
// P lambda_j / (kappa2 + sum_{k>=j} lambda_k) <= epsilon; the cutoff is one below
// the smallest such index and every mode above the cutoff is absorbed into the ridge.
inline RGFlowResult rg_flow(std::span<const double> lambda, std::span<const double> y, double P, double kappa2,
                            double epsilon = 0.01) {
    detail::check_spectrum(lambda);
    detail::check_targets(lambda, y);
    require(epsilon > 0 && epsilon < 1, "rg_flow: epsilon must lie in (0, 1)");
    require(P > 0 && kappa2 >= 0, "rg_flow: P must be positive and ridge non-negative");
    for (std::size_t k = 1; k < lambda.size(); ++k) require(lambda[k] <= lambda[k - 1], "rg_flow: spectrum must be descending");
    const std::size_t m = lambda.size();
    std::vector<double> suffix(m + 1, 0.0);
    for (std::size_t k = m; k-- > 0;) suffix[k] = suffix[k + 1] + lambda[k];
    std::size_t first = m;  // zero-based index of the smallest unlearnable mode
    for (std::size_t j = 0; j < m; ++j) {
        const double denom = kappa2 + suffix[j];
        if (denom > 0 && P * lambda[j] / denom <= epsilon) {
            first = j;
            break;
        }
    }
    RGFlowResult out;
    out.epsilon = epsilon;
    out.cutoff = first;
    double k2 = kappa2;
    double y2 = 0;
    out.trajectory.emplace_back(m, k2);
    for (std::size_t L = m; L > first; --L) {
        k2 += lambda[L - 1];
        y2 += y[L - 1] * y[L - 1];
        out.trajectory.emplace_back(L - 1, k2);
        out.absorbed_y2.push_back(y2);
    }
    out.kappa_rg2 = kappa2 + suffix[first];
    return out;
}

struct RGPrediction {
    RGFlowResult flow;
    LearningCurvePrediction ek;       // EK on the kept modes at the renormalised ridge
    LearningCurvePrediction closure;  // effective ridge on the kept modes with the renormalised bare ridge
};

inline RGPrediction rg_predict(std::span<const double> lambda, std::span<const double> y, double P, double kappa2,
                               double epsilon = 0.01) {
    RGPrediction out;
    out.flow = rg_flow(lambda, y, P, kappa2, epsilon);
    const std::size_t keep = out.flow.cutoff;
    double tail_y2 = 0;
    for (std::size_t k = keep; k < lambda.size(); ++k) tail_y2 += y[k] * y[k];
    if (keep == 0) {
        out.ek = detail::fill_curve({}, {}, P, kappa2, out.flow.kappa_rg2, 0.0, tail_y2);
        out.closure = out.ek;
        return out;
    }
    const auto lam = lambda.first(keep);
    const auto yk = y.first(keep);
    if (out.flow.kappa_rg2 > 0) {
        out.ek = ek_predict(lam, yk, P, out.flow.kappa_rg2);
        out.ek.bias += tail_y2;
        out.ek.loss = out.ek.bias + out.ek.variance;
    }
    const auto er = effective_ridge_solve(lam, P, out.flow.kappa_rg2);
    double D = 0;
    if (!er.all_learnable) D = (solve_D(lam, yk, P, er.kappa_eff2) * d_prefactor(lam, P, er.kappa_eff2) + tail_y2) /
                               d_prefactor(lam, P, er.kappa_eff2);
    out.closure = detail::fill_curve(lam, yk, P, kappa2, er.kappa_eff2, D, tail_y2);
    return out;
}

enum class ScalingRegime { ek, ridgeless };

inline double scaling_exponent(double alpha, ScalingRegime regime) {
    require(alpha > 0, "scaling_exponent: alpha must be positive");
    return regime == ScalingRegime::ek ? alpha / (1.0 + alpha) : alpha;
}

inline double learnability_threshold(double q, double d_in, double kappa_eff2, double norm_ratio = 1.0) {
    require(q >= 0, "learnability_threshold: degree must be non-negative");
    return kappa_eff2 * std::pow(d_in, q) * norm_ratio;
}

}  // namespace kt

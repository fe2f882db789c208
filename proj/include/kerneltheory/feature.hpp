#pragma once

#include "kerneltheory/common.hpp"
#include "kerneltheory/curves.hpp"
#include "kerneltheory/kernels.hpp"

#include <optional>

namespace kt {

struct KernelScalingSolution {
    double C_MF = 0.0;
    double Q = 1.0;  // 1 + C_MF / N
    double kappa_eff2 = 0.0;
    double D = 0.0;
    bool converged = false;
    double residual = 0.0;
    int iterations = 0;
    bool bracketed = false;
    std::vector<double> residual_history;
    LearningCurvePrediction prediction;  // curve of the scaled spectrum
};

namespace detail {

struct ScalingRhs {
    double value = 0.0;
    double magnitude = 0.0;  // sum of absolute term values, used to normalise residuals
    double kappa_eff2 = 0.0;
    double D = 0.0;
};

inline ScalingRhs scaling_rhs(std::span<const double> lambda1, std::span<const double> y, double P, double kappa2,
                              double Q) {
    std::vector<double> lam(lambda1.size());
    for (std::size_t k = 0; k < lam.size(); ++k) lam[k] = lambda1[k] / Q;
    const auto er = effective_ridge_solve(lam, P, kappa2);
    ScalingRhs out;
    out.kappa_eff2 = er.kappa_eff2;
    if (!er.all_learnable) out.D = solve_D(lam, y, P, er.kappa_eff2);
    const double r = out.kappa_eff2 / P;
    double learn = 0, fluct = 0, mean = 0;
    for (std::size_t k = 0; k < lam.size(); ++k) {
        const double l = lam[k];
        if (l <= 0) continue;
        const double d = l + r;
        learn += l / d;
        fluct += l * out.D / (P * d * d);
        mean += y[k] * y[k] * l / (d * d);
    }
    out.value = learn - fluct - mean;
    out.magnitude = learn + fluct + mean;
    return out;
}

}  // namespace detail

// Self-consistent kernel scaling: C/(1 + C/N) = sum_k [L_k - fluctuation_k - mean_k]
// on the spectrum lambda1 / Q with Q = 1 + C/N.
inline KernelScalingSolution kernel_scaling_solve(std::span<const double> lambda1, std::span<const double> y,
                                                  double P, double kappa2, double N) {
    detail::check_spectrum(lambda1);
    detail::check_targets(lambda1, y);
    require(N > 0, "kernel_scaling_solve: N must be positive");
    require(P > 0 && kappa2 >= 0, "kernel_scaling_solve: P must be positive and ridge non-negative");

    KernelScalingSolution sol;
    auto residual_at = [&](double C, detail::ScalingRhs& rhs) {
        const double Q = 1.0 + C / N;
        rhs = detail::scaling_rhs(lambda1, y, P, kappa2, Q);
        const double lhs = C / Q;
        const double scale = std::max({std::abs(lhs), rhs.magnitude, 1e-300});
        return (lhs - rhs.value) / scale;
    };

    double C = 0.0;
    detail::ScalingRhs rhs;
    constexpr int cap = 2000;
    bool ok = false;
    for (int it = 1; it <= cap; ++it) {
        const double res = residual_at(C, rhs);
        sol.residual_history.push_back(std::abs(res));
        sol.iterations = it;
        if (std::abs(res) < 1e-12) {
            ok = true;
            break;
        }
        if (rhs.value >= N) break;  // target C = R / (1 - R/N) would have Q <= 0
        const double target = rhs.value / (1.0 - rhs.value / N);
        C = 0.7 * C + 0.3 * target;
        if (!(1.0 + C / N > 0) || !std::isfinite(C)) break;
    }

    if (!ok) {
        // Bracket the root in log Q, starting from Q = 1 and widening outwards.
        sol.bracketed = true;
        auto F = [&](double logQ) {
            detail::ScalingRhs r;
            return residual_at(N * std::expm1(logQ), r);
        };
        double lo = 0.0, hi = 0.0;
        const double f0 = F(0.0);
        bool found = f0 == 0.0;
        double step = 0.05;
        for (int k = 0; k < 200 && !found; ++k, step *= 1.5) {
            if (f0 < 0) {
                lo = hi;
                hi = hi + step;
                if (F(hi) >= 0) found = true;
            } else {
                hi = lo;
                lo = lo - step;
                if (F(lo) <= 0) found = true;
            }
            if (std::abs(hi) > 700 || std::abs(lo) > 700) break;
        }
        if (!found) {
            std::string hist;
            for (double h : sol.residual_history) hist += " " + std::to_string(h);
            throw NumericalError("kernel scaling: no root with Q > 0; residual history:" + hist.substr(0, 400));
        }
        double flo = F(lo);
        for (int it = 0; it < 300 && hi - lo > 1e-15 * std::max(1.0, std::abs(hi)); ++it) {
            const double mid = 0.5 * (lo + hi);
            const double fm = F(mid);
            if ((fm < 0) == (flo < 0)) {
                lo = mid;
                flo = fm;
            } else {
                hi = mid;
            }
        }
        C = N * std::expm1(0.5 * (lo + hi));
        const double res = residual_at(C, rhs);
        sol.residual_history.push_back(std::abs(res));
    }

    sol.C_MF = C;
    sol.Q = 1.0 + C / N;
    if (!(sol.Q > 0)) throw NumericalError("kernel scaling: Q <= 0, invalid regime");
    sol.residual = sol.residual_history.back();
    sol.converged = sol.residual < 1e-8;
    sol.kappa_eff2 = rhs.kappa_eff2;
    sol.D = rhs.D;
    std::vector<double> lam(lambda1.size());
    for (std::size_t k = 0; k < lam.size(); ++k) lam[k] = lambda1[k] / sol.Q;
    sol.prediction = effective_ridge_predict(lam, y, P, kappa2);
    return sol;
}

struct AdaptationSolution {
    double c_perp = 0.0;
    double c_star = 0.0;
    double c_star_quadratic = 0.0;  // root of c^2 - c/S - K/S = 0 (large lambda_* limit)
    double lambda_star = 0.0;
    double lambda_perp = 0.0;
    double learnability = 0.0;
    double amplification = 0.0;  // lambda_* / lambda_perp
    double residual = 0.0;
    double overlap = 1.0;         // linear-channel factor of the activation (1 for linear)
    bool norm_concentration_ok = true;
    std::vector<double> roots;    // every positive root found
};

struct AdaptationParams {
    double S = 1, N_w = 1, C = 1, chi = 1, P = 1, kappa_eff2 = 1;
    double w_norm = 1, a_norm = 1;

    void validate() const {
        require(S > 0 && N_w > 0 && C > 0 && P > 0, "adaptation: sizes must be positive");
        require(chi >= 0 && kappa_eff2 >= 0, "adaptation: chi and kappa_eff2 must be non-negative");
        require(w_norm > 0 && a_norm >= 0, "adaptation: target norms must be positive");
    }
};

inline double predicted_learnability(double lambda_star, double P, double kappa_eff2) {
    require(P > 0 && kappa_eff2 >= 0 && lambda_star >= 0, "predicted_learnability: invalid arguments");
    if (lambda_star == 0) return 0.0;
    return lambda_star / (lambda_star + kappa_eff2 / P);
}

inline double predicted_learnability(const AdaptationSolution& sol, double P, double kappa_eff2) {
    return predicted_learnability(sol.lambda_star, P, kappa_eff2);
}

namespace detail {

// Smallest root above c0 of g, plus all roots found on a log grid.
inline std::vector<double> positive_roots(const std::function<double(double)>& g, double c0) {
    double hi = 2 * c0;
    while (g(hi) > 0) {
        hi *= 2;
        if (hi > 1e12 * c0) {
            throw NumericalError("adaptation: no positive root; residual at bracket ends " + std::to_string(g(c0)) +
                                 ", " + std::to_string(g(hi)));
        }
    }
    constexpr int grid = 4000;
    const double ratio = std::pow(hi / c0, 1.0 / grid);
    std::vector<double> roots;
    double a = c0, ga = g(c0);
    for (int i = 1; i <= grid; ++i) {
        const double b = i == grid ? hi : c0 * std::pow(ratio, i);
        const double gb = g(b);
        if (ga == 0) {
            roots.push_back(a);
        } else if ((ga > 0) != (gb > 0) && gb != 0) {
            double lo = a, up = b, glo = ga;
            for (int it = 0; it < 200 && up - lo > 4e-16 * up; ++it) {
                const double mid = 0.5 * (lo + up);
                const double gm = g(mid);
                if ((gm > 0) == (glo > 0)) {
                    lo = mid;
                    glo = gm;
                } else {
                    up = mid;
                }
            }
            roots.push_back(0.5 * (lo + up));
        }
        a = b;
        ga = gb;
    }
    if (roots.empty()) throw NumericalError("adaptation: root scan found no sign change");
    return roots;
}

}  // namespace detail

// c_* for a two-layer linear CNN with a linear single-index teacher.
inline AdaptationSolution adaptation_solve_linear(const AdaptationParams& p) {
    p.validate();
    const double coef = p.chi / (p.C * p.N_w) * p.a_norm * p.a_norm;
    const double r = p.kappa_eff2 / p.P;
    const double w2 = p.w_norm * p.w_norm;
    auto g = [&](double c) {
        const double d = c * w2 / p.N_w + r;
        return 1.0 / c - p.S + coef / (d * d);
    };
    AdaptationSolution sol;
    sol.c_perp = 1.0 / p.S;
    if (coef == 0) {
        sol.c_star = sol.c_perp;
        sol.roots = {sol.c_perp};
    } else {
        sol.roots = detail::positive_roots(g, sol.c_perp);
        sol.c_star = sol.roots.front();
    }
    sol.residual = std::abs(g(sol.c_star)) * sol.c_star;
    const double K = p.chi * p.N_w * p.a_norm * p.a_norm / (p.C * w2 * w2);
    sol.c_star_quadratic = 0.5 * (1.0 / p.S + std::sqrt(1.0 / (p.S * p.S) + 4.0 * K / p.S));
    sol.lambda_star = sol.c_star * w2 / p.N_w;
    sol.lambda_perp = sol.c_perp / p.N_w;
    sol.amplification = sol.lambda_star / sol.lambda_perp;
    sol.learnability = predicted_learnability(sol.lambda_star, p.P, p.kappa_eff2);
    return sol;
}

// Linear-channel factor of erf under mean-field norms: (4/pi) / (1 + 2 Tr Sigma).
inline double erf_linear_overlap(double trace_sigma) { return 4.0 / std::numbers::pi / (1.0 + 2.0 * trace_sigma); }

// E_x[erf(w.x) v.x] for x ~ N(0, I).
inline double erf_overlap_integral(double w_norm2, double w_dot_v) {
    return 2.0 / std::sqrt(std::numbers::pi) * w_dot_v / std::sqrt(1.0 + 2.0 * w_norm2);
}

// Erf version: the teacher term in the weight action and the adapted eigenvalue each
// pick up the linear-channel factor g(Tr Sigma), Tr Sigma = (S - 1) c_perp + c_*.
inline AdaptationSolution adaptation_solve_erf(const AdaptationParams& p) {
    p.validate();
    const double coef = p.chi / (p.C * p.N_w) * p.a_norm * p.a_norm;
    const double r = p.kappa_eff2 / p.P;
    const double w2 = p.w_norm * p.w_norm;
    const double c_perp = 1.0 / p.S;
    auto trace = [&](double c) { return (p.S - 1.0) * c_perp + c; };
    auto g = [&](double c) {
        const double g1 = erf_linear_overlap(trace(c));
        const double d = g1 * c * w2 / p.N_w + r;
        return 1.0 / c - p.S + g1 * coef / (d * d);
    };
    AdaptationSolution sol;
    sol.c_perp = c_perp;
    if (coef == 0) {
        sol.c_star = c_perp;
        sol.roots = {c_perp};
    } else {
        sol.roots = detail::positive_roots(g, c_perp);
        sol.c_star = sol.roots.front();
    }
    sol.residual = std::abs(g(sol.c_star)) * sol.c_star;
    const double tr = trace(sol.c_star);
    sol.overlap = erf_linear_overlap(tr);
    sol.norm_concentration_ok = sol.c_star < 0.5 * tr;
    const double K = p.chi * p.N_w * p.a_norm * p.a_norm / (p.C * w2 * w2 * sol.overlap);
    sol.c_star_quadratic = 0.5 * (1.0 / p.S + std::sqrt(1.0 / (p.S * p.S) + 4.0 * K / p.S));
    sol.lambda_star = sol.overlap * sol.c_star * w2 / p.N_w;
    sol.lambda_perp = sol.overlap * sol.c_perp / p.N_w;
    sol.amplification = sol.lambda_star / sol.lambda_perp;
    sol.learnability = predicted_learnability(sol.lambda_star, p.P, p.kappa_eff2);
    return sol;
}

// Effective ridge of the non-adapted kernel on x ~ N(0, I_{S N_w}) with w ~ N(0, I/S):
// d_in degenerate linear modes; for erf the non-linear remainder of the trace joins the ridge.
inline double adaptation_kappa_eff(Activation act, double S, double N_w, double P, double kappa2) {
    require(S > 0 && N_w > 0 && P > 0 && kappa2 >= 0, "adaptation_kappa_eff: invalid arguments");
    const auto d_in = static_cast<std::size_t>(std::llround(S * N_w));
    double linear_total = 1.0, extra = 0.0;
    if (act == Activation::erf) {
        linear_total = erf_linear_overlap(1.0);
        extra = 2.0 / std::numbers::pi * std::asin(2.0 / 3.0) - linear_total;
    } else {
        require(act == Activation::linear, "adaptation_kappa_eff: linear or erf only");
    }
    std::vector<double> lam(d_in, linear_total / static_cast<double>(d_in));
    const auto er = effective_ridge_solve(lam, P, kappa2 + extra);
    return er.kappa_eff2;
}

// Adapted learnability at P with kappa_eff re-solved for that P.
inline AdaptationSolution adaptation_at(Activation act, AdaptationParams p, double P, double kappa2) {
    p.P = P;
    p.kappa_eff2 = adaptation_kappa_eff(act, p.S, p.N_w, P, kappa2);
    return act == Activation::erf ? adaptation_solve_erf(p) : adaptation_solve_linear(p);
}

// Smallest P in [P_lo, P_hi] where the adapted learnability reaches `level`, by bisection in log P.
inline double adaptation_sample_complexity(Activation act, const AdaptationParams& p, double kappa2, double level = 0.5,
                                           double P_lo = 1.0, double P_hi = 1e9) {
    require(level > 0 && level < 1, "adaptation_sample_complexity: level must lie in (0, 1)");
    require(P_lo > 0 && P_hi > P_lo, "adaptation_sample_complexity: need 0 < P_lo < P_hi");
    auto gap = [&](double logP) { return adaptation_at(act, p, std::exp(logP), kappa2).learnability - level; };
    double lo = std::log(P_lo), hi = std::log(P_hi);
    if (gap(lo) >= 0) return P_lo;
    if (gap(hi) < 0)
        throw NumericalError("adaptation_sample_complexity: learnability stays below " + std::to_string(level) +
                             " up to P = " + std::to_string(P_hi));
    while (hi - lo > 1e-10) {
        const double mid = 0.5 * (lo + hi);
        (gap(mid) < 0 ? lo : hi) = mid;
    }
    return std::exp(hi);
}

struct OnDataAdaptation {
    Vector t;
    double Q_bar = 1.0;
    double residual_t = 0.0;  // ||(Q K + r I) t - y|| / ||y||
    double residual_Q = 0.0;  // |Q (1 - (chi/N) t'Kt) - 1|
    int iterations = 0;
};

namespace detail {

inline double q_equation(const Vector& ev, const Vector& z, double a, double r, double Q) {
    double s = 0;
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        const double d = Q * ev(i) + r;
        if (d > 0) s += ev(i) * z(i) * z(i) / (d * d);
    }
    return Q * (1.0 - a * s) - 1.0;
}

}  // namespace detail

// t = [Q K + (kappa2/P) I]^{-1} y with Q = 1 / (1 - (chi/N) t'Kt), by damped
// alternation between the two equations.
inline OnDataAdaptation ondata_adaptation_fixed_point(const Matrix& K, const Vector& y, double chi, double N,
                                                      double kappa2, double P) {
    require(K.rows() == K.cols() && K.rows() == y.size(), "ondata_adaptation: dimension mismatch");
    require(chi >= 0 && N > 0 && kappa2 >= 0 && P > 0, "ondata_adaptation: invalid parameters");
    require(is_psd(K), "ondata_adaptation: kernel must be PSD");
    OnDataAdaptation out;
    const double ynorm = y.norm();
    if (ynorm == 0) {
        out.t = Vector::Zero(y.size());
        return out;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(K));
    const Vector ev = es.eigenvalues().cwiseMax(0.0);
    const Matrix& V = es.eigenvectors();
    const Vector z = V.transpose() * y;
    const double r = kappa2 / P;
    const double a = chi / N;
    auto t_of = [&](double Q) {
        Vector s(ev.size());
        for (Eigen::Index i = 0; i < ev.size(); ++i) {
            const double d = Q * ev(i) + r;
            if (d <= 0) throw NumericalError("ondata_adaptation: singular system at zero ridge");
            s(i) = z(i) / d;
        }
        return Vector(V * s);
    };
    auto quad = [&](const Vector& t) { return t.dot(K * t); };

    double Q = 1.0;
    Vector t = t_of(Q);
    bool ok = false;
    for (int it = 1; it <= 5000; ++it) {
        out.iterations = it;
        const double denom = 1.0 - a * quad(t);
        if (denom <= 0) break;
        const double Qn = 1.0 / denom;
        Q = 0.5 * Q + 0.5 * Qn;
        t = t_of(Q);
        if (std::abs(detail::q_equation(ev, z, a, r, Q)) < 1e-13) {
            ok = true;
            break;
        }
    }
    if (!ok) {
        // Smallest root of h(Q) = Q (1 - a t(Q)'K t(Q)) - 1 above Q = 1; h(1) <= 0, h -> +inf.
        auto h = [&](double q) { return detail::q_equation(ev, z, a, r, q); };
        double lo = 1.0, hi = 2.0;
        while (h(hi) < 0) {
            lo = hi;
            hi *= 2;
            if (hi > 1e300) throw NumericalError("ondata_adaptation: no fixed point with Q > 0");
        }
        for (int it = 0; it < 400 && hi - lo > 1e-16 * hi; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (h(mid) < 0) lo = mid;
            else hi = mid;
        }
        Q = 0.5 * (lo + hi);
        t = t_of(Q);
    }
    const double denom = 1.0 - a * quad(t);
    if (denom <= 0) throw NumericalError("ondata_adaptation: Q pole crossed (1 - (chi/N) t'Kt <= 0)");
    out.t = t;
    out.Q_bar = Q;
    out.residual_t = ((Q * K + r * Matrix::Identity(K.rows(), K.rows())) * t - y).norm() / ynorm;
    out.residual_Q = std::abs(Q * denom - 1.0);
    return out;
}

// Residual of t against [K + (chi/N) Q Ktt'K + (kappa2/P) I] t = y.
inline double ondata_woodbury_residual(const Matrix& K, const Vector& y, const Vector& t, double chi, double N,
                                       double kappa2, double P) {
    const double a = chi / N;
    const Vector Kt = K * t;
    const double Q = 1.0 / (1.0 - a * t.dot(Kt));
    const Matrix A = K + a * Q * Kt * Kt.transpose() + (kappa2 / P) * Matrix::Identity(K.rows(), K.rows());
    return (A * t - y).norm() / std::max(y.norm(), 1e-300);
}

// Residual of t against [[K^{-1} - (chi/N) tt']^{-1} + (kappa2/P) I] t = y; K must be invertible.
inline double ondata_inverse_form_residual(const Matrix& K, const Vector& y, const Vector& t, double chi, double N,
                                           double kappa2, double P) {
    const auto n = K.rows();
    const Matrix I = Matrix::Identity(n, n);
    const Matrix Kinv = K.ldlt().solve(I);
    const Matrix adapted = (Kinv - (chi / N) * t * t.transpose()).ldlt().solve(I);
    return ((adapted + (kappa2 / P) * I) * t - y).norm() / std::max(y.norm(), 1e-300);
}

struct TransferPlan {
    double scale = 1;
    double N = 0, kappa2 = 0, gamma = 0, P = 0;
};

inline TransferPlan transfer_rescale(const TransferPlan& base, double S_f) {
    require(S_f > 0, "transfer_rescale: scale must be positive");
    TransferPlan out;
    out.scale = base.scale * S_f;
    out.N = base.N * S_f;
    out.kappa2 = base.kappa2 / S_f;
    out.gamma = base.gamma / S_f;
    out.P = base.P * S_f * S_f;
    return out;
}

}  // namespace kt

#include "kerneltheory/feature.hpp"
#include "kerneltheory/spectral.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace kt;

namespace {

// Target terms of the scaling equation at the GP point (Q = 1) for a flat spectrum
// lambda = 1/M, ridgeless, every target coefficient equal to c. Closed forms only.
double flat_target_terms(double M, double P, double c) {
    const double lam = 1.0 / M;
    const double keff = 1.0 - P / M;
    const double r = keff / P;
    const double d = lam + r;
    const double L = lam / d;
    const double v = lam * keff / (P * lam + keff);
    const double pre = 1.0 - M * v * v * P / (keff * keff);
    const double D = M * (1 - L) * (1 - L) * c * c / pre;
    const double fluct = M * lam * D / (P * d * d);
    const double mean = M * c * c * lam / (d * d);
    return fluct + mean;
}

double quadratic_root(double a, double b, double c) { return (-b + std::sqrt(b * b - 4 * a * c)) / (2 * a); }

double bisect(const std::function<double(double)>& f, double lo, double hi) {
    for (int i = 0; i < 300; ++i) {
        const double mid = 0.5 * (lo + hi);
        if ((f(lo) < 0) == (f(mid) < 0)) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

AdaptationParams quadratic_regime() {
    AdaptationParams p;
    p.S = 50;
    p.N_w = 10;
    p.C = 1000;
    p.chi = 100;
    p.P = 1e12;
    p.kappa_eff2 = 1.0;
    return p;
}

}  // namespace

TEST(KernelScaling, WideLimitIsTheGp) {
    const auto lam = powerlaw_spectrum(1.0, 1.0, 400);
    std::vector<double> y(lam.size());
    for (std::size_t k = 0; k < y.size(); ++k) y[k] = std::sqrt(lam[k]);
    const auto s = kernel_scaling_solve(lam, y, 50, 0.01, 1e12);
    EXPECT_NEAR(s.Q, 1.0, 1e-6);
    EXPECT_TRUE(s.converged);
    const auto gp = effective_ridge_predict(lam, y, 50, 0.01);
    EXPECT_LT((s.prediction.mean_mode - gp.mean_mode).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(KernelScaling, RidgelessQuadratic) {
    const double M = 100, P = 10;
    for (double ratio : {1.0, 100.0}) {
        const double c = 30.0;
        const std::vector<double> lam(100, 1.0 / M);
        const std::vector<double> y(100, c);
        const double Y = flat_target_terms(M, P, c);
        const double N = Y / ratio;
        // ridgeless learnabilities sum to P, so (Y/N) Q^2 + (1 - P/N) Q - 1 = 0
        const double Q = quadratic_root(Y / N, 1 - P / N, -1);
        const auto s = kernel_scaling_solve(lam, y, P, 0.0, N);
        ASSERT_TRUE(s.converged) << s.residual;
        EXPECT_NEAR(s.Q, Q, 1e-8 * Q) << ratio;
        if (ratio == 1.0) EXPECT_NEAR(s.Q, (std::sqrt(5.0) - 1) / 2, 1e-4);
        else EXPECT_NEAR(s.Q, std::sqrt(N / Y), 0.05 * std::sqrt(N / Y));
    }
}

TEST(KernelScaling, RejectsBadArguments) {
    const std::vector<double> lam = {1.0};
    EXPECT_THROW(kernel_scaling_solve(lam, lam, 10, 0.1, 0.0), InvalidArgument);
    EXPECT_THROW(kernel_scaling_solve(lam, lam, 0, 0.1, 10), InvalidArgument);
}

TEST(AdaptationLinear, LazyLimit) {
    auto p = quadratic_regime();
    p.chi = 0;
    const auto s = adaptation_solve_linear(p);
    EXPECT_DOUBLE_EQ(s.c_star, 1.0 / 50);
    p.chi = 1e-9;
    EXPECT_NEAR(adaptation_solve_linear(p).c_star, 1.0 / 50, 1e-8);
}

TEST(AdaptationLinear, QuadraticRegime) {
    const auto s = adaptation_solve_linear(quadratic_regime());
    const double q = quadratic_root(1.0, -0.02, -0.02);
    EXPECT_NEAR(q, 0.1518, 1e-4);
    EXPECT_NEAR(s.c_star_quadratic, q, 1e-12);
    EXPECT_NEAR(s.c_star, q, 1e-8);
    EXPECT_NEAR(std::sqrt(0.02), s.c_star, 0.1 * s.c_star);
    EXPECT_EQ(s.c_perp, 1.0 / 50);
    EXPECT_LT(s.residual, 1e-8);
}

TEST(AdaptationLinear, FullEquationResidual) {
    auto p = quadratic_regime();
    p.P = 1000;
    const auto s = adaptation_solve_linear(p);
    const double c = s.c_star;
    const double lhs = 1.0 / c;
    const double rhs = p.S - p.chi / (p.C * p.N_w) / std::pow(c / p.N_w + p.kappa_eff2 / p.P, 2);
    EXPECT_NEAR(lhs, rhs, 1e-8 * lhs);
    for (double root : s.roots) EXPECT_GE(root, s.c_star);
}

TEST(PredictedLearnability, Examples) {
    EXPECT_DOUBLE_EQ(predicted_learnability(0.01, 100, 1.0), 0.5);
    EXPECT_GT(predicted_learnability(0.01, 1e15, 1.0), 1 - 1e-10);
    EXPECT_LT(predicted_learnability(0.01, 1e15, 1.0), 1.0);
    EXPECT_NEAR(predicted_learnability(0.0152, 1000, 1.0), 0.938, 1e-3);
    auto p = quadratic_regime();
    p.P = 1000;
    const auto s = adaptation_solve_linear(p);
    EXPECT_NEAR(s.learnability, predicted_learnability(s, 1000, 1.0), 1e-15);
    EXPECT_NEAR(s.learnability, 0.938, 0.01);
}

TEST(AdaptationErf, OverlapIntegral) {
    // E[erf(u) u], u ~ N(0, 1), by midpoint quadrature
    const int n = 200000;
    const double h = 20.0 / n;
    double s = 0;
    for (int i = 0; i < n; ++i) {
        const double u = -10 + (i + 0.5) * h;
        s += std::erf(u) * u * std::exp(-0.5 * u * u);
    }
    s *= h / std::sqrt(2 * std::numbers::pi);
    EXPECT_NEAR(erf_overlap_integral(1.0, 1.0), s, 1e-9);
    EXPECT_NEAR(s, 0.6515, 1e-4);
}

TEST(AdaptationErf, LazyLimitAndRatio) {
    auto p = quadratic_regime();
    p.chi = 0;
    EXPECT_DOUBLE_EQ(adaptation_solve_erf(p).c_star, 1.0 / 50);
    p = quadratic_regime();
    p.P = 1000;
    p.kappa_eff2 = adaptation_kappa_eff(Activation::erf, p.S, p.N_w, p.P, 0.01);
    const auto e = adaptation_solve_erf(p);
    p.kappa_eff2 = adaptation_kappa_eff(Activation::linear, p.S, p.N_w, p.P, 0.01);
    const auto l = adaptation_solve_linear(p);
    EXPECT_GT(e.amplification, 1);
    EXPECT_GT(l.amplification, 1);
    const double ratio = e.amplification / l.amplification;
    EXPECT_GT(ratio, 0.5);
    EXPECT_LT(ratio, 2.0);
    EXPECT_TRUE(e.norm_concentration_ok);
}

TEST(OnData, LazyLimitIsGpr) {
    const Matrix X = oracle::random_points(8, 3, 1);
    const Matrix K = nngp_kernel(NetworkSpec::fcn(3, Activation::erf), X);
    const Vector y = oracle::random_points(8, 1, 2).col(0);
    const auto s = ondata_adaptation_fixed_point(K, y, 0.0, 100, 0.5, 8);
    EXPECT_EQ(s.Q_bar, 1.0);
    const Vector ref = (K + (0.5 / 8) * Matrix::Identity(8, 8)).inverse() * y;
    EXPECT_LT((s.t - ref).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(OnData, ZeroTarget) {
    const auto s = ondata_adaptation_fixed_point(Matrix::Identity(3, 3), Vector::Zero(3), 5, 10, 1, 3);
    EXPECT_EQ(s.t, Vector::Zero(3));
    EXPECT_EQ(s.Q_bar, 1.0);
}

TEST(OnData, IdentityKernelScalarOracle) {
    Vector y(3);
    y << 0.3, -0.4, 0.5;
    const double chi = 2, N = 10, kappa2 = 0.3, P = 3;
    const double a = chi / N, r = kappa2 / P, s2 = y.squaredNorm();
    // t = y / (Q + r) and Q ((Q + r)^2 - a |y|^2) = (Q + r)^2
    const double Q = bisect([&](double q) { return q * ((q + r) * (q + r) - a * s2) - (q + r) * (q + r); }, 1.0, 10.0);
    const auto s = ondata_adaptation_fixed_point(Matrix::Identity(3, 3), y, chi, N, kappa2, P);
    EXPECT_NEAR(s.Q_bar, Q, 1e-10);
    EXPECT_LT((s.t - y / (Q + r)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(OnData, StrongCouplingStaysBelowThePole) {
    Vector y(2);
    y << 3.0, 3.0;
    const auto s = ondata_adaptation_fixed_point(Matrix::Identity(2, 2), y, 1e6, 1, 0.0, 2);
    // K = I, ridgeless: Q^2 - Q - (chi/N)|y|^2 = 0
    EXPECT_NEAR(s.Q_bar, quadratic_root(1, -1, -1e6 * 18), 1e-8 * s.Q_bar);
    EXPECT_LT(s.residual_t, 1e-10);
    EXPECT_LT(s.residual_Q, 1e-10);
    EXPECT_THROW(ondata_adaptation_fixed_point(Matrix::Identity(2, 2), y, -1, 1, 0.0, 2), InvalidArgument);
}

TEST(Transfer, Examples) {
    const TransferPlan base{1, 100, 1, 0.1, 1000};
    const auto id = transfer_rescale(base, 1);
    EXPECT_EQ(id.N, 100);
    EXPECT_EQ(id.P, 1000);
    const auto four = transfer_rescale(base, 4);
    EXPECT_DOUBLE_EQ(four.N, 400);
    EXPECT_DOUBLE_EQ(four.kappa2, 0.25);
    EXPECT_DOUBLE_EQ(four.gamma, 0.025);
    EXPECT_DOUBLE_EQ(four.P, 16000);
    EXPECT_THROW(transfer_rescale(base, 0), InvalidArgument);
}

// ---- properties ----

TEST(FeatureProperties, TransferComposesAndKeepsOverparametrization) {
    const TransferPlan base{1, 64, 0.5, 0.2, 300};
    for (double s1 : {0.5, 2.0, 3.0})
        for (double s2 : {0.25, 1.5, 7.0}) {
            const auto a = transfer_rescale(transfer_rescale(base, s2), s1);
            const auto b = transfer_rescale(base, s1 * s2);
            EXPECT_NEAR(a.N, b.N, 1e-12 * b.N);
            EXPECT_NEAR(a.P, b.P, 1e-12 * b.P);
            EXPECT_NEAR(a.kappa2, b.kappa2, 1e-12 * b.kappa2);
            EXPECT_NEAR(a.N * a.N / a.P, base.N * base.N / base.P, 1e-12 * base.N * base.N / base.P);
        }
}

TEST(FeatureProperties, RidgelessScalingKeepsLearnabilities) {
    const auto lam = powerlaw_spectrum(0.8, 1.0, 300);
    std::vector<double> y(lam.size());
    for (std::size_t k = 0; k < y.size(); ++k) y[k] = 3 * std::sqrt(lam[k]);
    for (double N : {5.0, 50.0, 500.0}) {
        const auto s = kernel_scaling_solve(lam, y, 40, 0.0, N);
        ASSERT_TRUE(s.converged);
        EXPECT_LT(s.Q, 1.0);
        const auto gp = effective_ridge_predict(lam, y, 40, 0.0);
        EXPECT_LT((s.prediction.learnability - gp.learnability).cwiseAbs().maxCoeff(), 1e-8) << N;
    }
}

TEST(FeatureProperties, AdaptationAmplifies) {
    for (double chi : {1.0, 10.0, 100.0})
        for (double S : {8.0, 32.0}) {
            AdaptationParams p;
            p.S = S;
            p.N_w = 4;
            p.C = 64;
            p.chi = chi;
            p.P = 200;
            p.kappa_eff2 = 0.5;
            const auto s = adaptation_solve_linear(p);
            EXPECT_EQ(s.c_perp, 1.0 / S);
            EXPECT_GE(s.amplification, 1.0);
            EXPECT_NEAR(s.amplification, s.c_star * S, 1e-12 * s.amplification);
            EXPECT_GE(s.learnability, 0);
            EXPECT_LT(s.learnability, 1);
        }
}

TEST(FeatureProperties, OnDataFormsAgree) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const int P = 12;
        const Matrix X = oracle::random_points(P, 4, 10 + seed);
        const Matrix K = nngp_kernel(NetworkSpec::fcn(4, Activation::erf), X);
        const Vector y = oracle::random_points(P, 1, 20 + seed).col(0);
        const double chi = 0.5 + seed, N = 50, kappa2 = 0.2;
        const auto s = ondata_adaptation_fixed_point(K, y, chi, N, kappa2, P);
        EXPECT_LT(s.residual_t, 1e-10);
        EXPECT_LT(s.residual_Q, 1e-10);
        EXPECT_LT(ondata_woodbury_residual(K, y, s.t, chi, N, kappa2, P), 1e-8);
        EXPECT_LT(ondata_inverse_form_residual(K, y, s.t, chi, N, kappa2, P), 1e-8);
    }
}

TEST(FeatureProperties, SampleComplexitySlope) {
    // sizes scaled by alpha from N_w = 4, S = 16, C = 64 at chi = 100
    std::vector<double> log_d, log_p;
    for (double alpha : {1.0, 2.0, 4.0, 8.0}) {
        AdaptationParams p;
        p.N_w = 4 * alpha;
        p.S = 16 * alpha;
        p.C = 64 * alpha;
        p.chi = 100;
        auto learn = [&](double lp) {
            auto q = p;
            q.P = std::exp(lp);
            q.kappa_eff2 = adaptation_kappa_eff(Activation::linear, q.S, q.N_w, q.P, 0.01);
            return adaptation_solve_linear(q).learnability - 0.5;
        };
        log_p.push_back(bisect(learn, std::log(1.0), std::log(1e8)));
        log_d.push_back(std::log(p.S * p.N_w));
    }
    const double n = double(log_d.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < log_d.size(); ++i) {
        mx += log_d[i] / n;
        my += log_p[i] / n;
    }
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < log_d.size(); ++i) {
        sxy += (log_d[i] - mx) * (log_p[i] - my);
        sxx += (log_d[i] - mx) * (log_d[i] - mx);
    }
    EXPECT_NEAR(sxy / sxx, 0.75, 0.1);
}

#include "kerneltheory/curves.hpp"
#include "kerneltheory/rng.hpp"
#include "kerneltheory/spectral.hpp"

#include <gtest/gtest.h>

using namespace kt;

namespace {

std::vector<double> flat(std::size_t M) { return std::vector<double>(M, 1.0 / static_cast<double>(M)); }

std::vector<double> powerlaw_targets(const std::vector<double>& lambda) {
    std::vector<double> y(lambda.size());
    for (std::size_t k = 0; k < y.size(); ++k) y[k] = std::sqrt(lambda[k]);
    return y;
}

struct DrawMoments {
    double posterior_variance = 0;  // E_D tr Sigma_post
    double dataset_variance = 0;    // sum_k Var_D(mean coefficient k)
};

// Linear kernel x.x'/M on x ~ N(0, I_M): lambda_k = 1/M, phi_k = x_k. Coefficients of
// the GPR mean are (1/M) X' (X X'/M + kappa2)^{-1} y.
DrawMoments flat_gpr_draws(int M, int P, double kappa2, const Vector& beta, int draws) {
    Vector mean = Vector::Zero(M);
    Vector second = Vector::Zero(M);
    double post = 0;
    for (int s = 0; s < draws; ++s) {
        CounterRng rng({static_cast<std::uint64_t>(s), 77});
        const Matrix X = rng.normal_matrix(P, M);
        const Vector y = X * beta;
        Matrix A = X * X.transpose() / M;
        A.diagonal().array() += kappa2;
        const Eigen::LLT<Matrix> llt(A);
        const Vector w = X.transpose() * llt.solve(y) / M;
        mean += w;
        second += w.cwiseAbs2();
        // tr of (M I + X'X / kappa2)^{-1} = (1/M)(M - tr(X'(XX' + M kappa2)^{-1} X))
        const Matrix S = llt.solve(X);
        post += (1.0 - (X.array() * S.array()).sum() / (static_cast<double>(M) * M)) / draws;
    }
    mean /= draws;
    second /= draws;
    return {post, (second - mean.cwiseAbs2()).sum()};
}

}  // namespace

TEST(EkPredict, EqualScalesGiveHalfLearnability) {
    const std::vector<double> lam = {0.1, 0.02};
    const std::vector<double> y = {1.0, 1.0};
    const auto r = ek_predict(lam, y, 10.0, 1.0);
    EXPECT_DOUBLE_EQ(r.learnability(0), 0.5);
    EXPECT_DOUBLE_EQ(r.mean_mode(0), 0.5);
}

TEST(EkPredict, FlatSpectrumVariance) {
    const auto lam = flat(100);
    const std::vector<double> y(100, 0.1);
    const auto r = ek_predict(lam, y, 50.0, 1.0);
    EXPECT_NEAR(r.variance, 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(r.bias, 100 * (4.0 / 9.0) * 0.01, 1e-12);
    EXPECT_NEAR(r.loss, r.bias + r.variance, 1e-15);
}

TEST(EkPredict, LargePLimit) {
    const std::vector<double> lam = {0.5, 0.25, 0.125};
    const std::vector<double> y = {1.0, -2.0, 0.5};
    const auto r = ek_predict(lam, y, 1e12, 1.0);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(r.mean_mode(k), y[static_cast<std::size_t>(k)], 1e-10);
    EXPECT_LT(r.variance, 1e-10);
}

TEST(EkPredict, RejectsZeroRidge) {
    const std::vector<double> lam = {1.0};
    EXPECT_THROW(ek_predict(lam, lam, 5.0, 0.0), InvalidArgument);
    EXPECT_THROW(ek_predict(lam, lam, 0.0, 1.0), InvalidArgument);
}

TEST(DeepLinearCorrection, Limits) {
    const auto lam = flat(10);
    const std::vector<double> y(10, 0.3);
    EXPECT_NEAR(deep_linear_correction_factor(lam, y, 10, 1, 1, 1e15), 1.0, 1e-12);
    EXPECT_EQ(deep_linear_correction_factor(lam, std::vector<double>(10, 0.0), 10, 1, 1, 5), 1.0);
    EXPECT_THROW(deep_linear_correction_factor(lam, y, 10, 1, 1, 0), InvalidArgument);
}

TEST(DeepLinearCorrection, FlatSpectrumClosedForm) {
    const std::size_t d = 50;
    const auto lam = flat(d);
    const std::vector<double> y(d, 1.0 / std::sqrt(double(d)));
    // each term y^2 (1/d) / (2/d)^2 = y^2 d / 4, summing to d / 4
    const double expected = 1.0 + 0.5 / 1000.0 * (double(d) / 4.0);
    EXPECT_NEAR(deep_linear_correction_factor(lam, y, double(d), 1.0, 1.0, 1000.0), expected, 1e-12);
    EXPECT_NEAR(perturbative_ek_correction_deep_linear(0.2, lam, y, double(d), 1.0, 1.0, 1000.0), 0.2 * expected, 1e-12);
}

TEST(EffectiveRidge, FlatRidgeless) {
    for (double P : {10.0, 50.0, 99.0}) {
        const auto r = effective_ridge_solve(flat(100), P, 0.0);
        EXPECT_NEAR(r.kappa_eff2, 1.0 - P / 100.0, 1e-10) << P;
        EXPECT_LT(r.residual, 1e-10);
    }
    EXPECT_TRUE(effective_ridge_solve(flat(100), 100.0, 0.0).all_learnable);
    EXPECT_TRUE(effective_ridge_solve(flat(100), 300.0, 0.0).all_learnable);
}

TEST(EffectiveRidge, FlatWithRidgeMatchesQuadratic) {
    const double M = 100;
    for (double P : {5.0, 50.0, 500.0})
        for (double k2 : {0.01, 1.0, 30.0}) {
            const double b = P - M - k2 * M;
            const double root = (-b + std::sqrt(b * b + 4 * M * k2 * P)) / (2 * M);
            EXPECT_NEAR(effective_ridge_solve(flat(100), P, k2).kappa_eff2, root, 1e-10 * root) << P << " " << k2;
        }
}

TEST(EffectiveRidge, LargePGivesBareRidge) {
    const auto lam = powerlaw_spectrum(1.5, 1.0, 1000);
    EXPECT_NEAR(effective_ridge_solve(lam, 1e12, 0.3).kappa_eff2, 0.3, 1e-6);
}

TEST(SolveD, Examples) {
    const auto lam = flat(20);
    EXPECT_EQ(solve_D(lam, std::vector<double>(20, 0.0), 10.0, 0.5), 0.0);
    // single mode: prefactor 1 - (P v^2 / k^2) with v = lambda k / (P lambda + k)
    const std::vector<double> one = {1.0};
    const std::vector<double> y = {2.0};
    const double P = 1e4, k = 1.0;
    const double v = k / (P + k);
    const double pre = 1 - P * v * v / (k * k);
    ASSERT_GT(pre, 0);
    const double L = P / (P + k);
    EXPECT_NEAR(solve_D(one, y, P, k), (1 - L) * (1 - L) * 4 / pre, 1e-12);
    EXPECT_NEAR(solve_D(one, y, P, k, DiscrepancySource::mean), L * L * 4 / pre, 1e-9);
}

TEST(SolveD, RejectsNonPositivePrefactor) {
    // kappa_eff2 far below the self-consistent value
    EXPECT_THROW(solve_D(flat(100), std::vector<double>(100, 0.1), 50.0, 1e-6), NumericalError);
}

TEST(ModeCovariance, Examples) {
    const auto a = mode_covariance(0.3, 20, 0.5, 0.0);
    EXPECT_EQ(a.dataset, 0.0);
    EXPECT_NEAR(a.posterior, 1.0 / (20 / 0.5 + 1 / 0.3), 1e-15);
    const auto z = mode_covariance(0.0, 20, 0.5, 2.0);
    EXPECT_EQ(z.posterior, 0.0);
    EXPECT_EQ(z.dataset, 0.0);
    EXPECT_LT(mode_covariance(1e-14, 20, 0.5, 2.0).posterior, 1e-13);
}

TEST(DatasetVariance, FlatSpectrumAgainstGprDraws) {
    const int M = 100, P = 50, draws = 10000;
    const double kappa2 = 1.0;
    const Vector beta = Vector::Constant(M, 1.0 / std::sqrt(double(M)));
    const auto mc = flat_gpr_draws(M, P, kappa2, beta, draws);
    const std::vector<double> y(M, 1.0 / std::sqrt(double(M)));
    const auto th = effective_ridge_predict(flat(M), y, P, kappa2);
    EXPECT_NEAR(th.dataset_variance, mc.dataset_variance, 0.1 * mc.dataset_variance);
    EXPECT_NEAR(th.posterior_variance, mc.posterior_variance, 0.1 * mc.posterior_variance);
    EXPECT_NEAR(th.posterior_variance + th.dataset_variance, mc.posterior_variance + mc.dataset_variance,
                0.1 * (mc.posterior_variance + mc.dataset_variance));
    // D recovered from the per-mode variance
    const auto mcov = mode_covariance(1.0 / M, P, th.kappa_eff2, 1.0);
    EXPECT_NEAR(mc.dataset_variance / (M * mcov.dataset), th.D, 0.1 * th.D);
}

TEST(RgFlow, NothingIntegratedOut) {
    const std::vector<double> lam = {1.0, 0.5, 0.25};
    const auto r = rg_flow(lam, lam, 100.0, 1.0, 0.01);
    EXPECT_EQ(r.cutoff, 3u);
    EXPECT_EQ(r.kappa_rg2, 1.0);
    EXPECT_EQ(r.trajectory.size(), 1u);
}

TEST(RgFlow, EverythingIntegratedOut) {
    const std::vector<double> lam = {1.0, 0.5, 0.25};
    const auto r = rg_flow(lam, lam, 1e-4, 2.0, 0.01);
    EXPECT_EQ(r.cutoff, 0u);
    EXPECT_DOUBLE_EQ(r.kappa_rg2, 2.0 + 1.75);
    EXPECT_NEAR(r.absorbed_y2.back(), 1.0 + 0.25 + 0.0625, 1e-15);
}

TEST(RgFlow, PowerLawRidgeMatchesTailEstimate) {
    const auto lam = powerlaw_spectrum(1.0, 1.0, 1000000);
    const auto r = rg_flow(lam, powerlaw_targets(lam), 256, 0.0, 0.01);
    ASSERT_GT(r.cutoff, 0u);
    EXPECT_NEAR(r.kappa_rg2, 1.0 / double(r.cutoff), 0.05 / double(r.cutoff));
}

TEST(RgFlow, RejectsBadInput) {
    const std::vector<double> up = {0.5, 1.0};
    EXPECT_THROW(rg_flow(up, up, 10, 0.0), InvalidArgument);
    EXPECT_THROW(rg_flow(std::vector<double>{}, std::vector<double>{}, 10, 0.0), InvalidArgument);
    const std::vector<double> ok = {1.0};
    EXPECT_THROW(rg_flow(ok, ok, 10, 0.0, 1.5), InvalidArgument);
}

TEST(ScalingExponent, Examples) {
    EXPECT_DOUBLE_EQ(scaling_exponent(1.0, ScalingRegime::ek), 0.5);
    EXPECT_DOUBLE_EQ(scaling_exponent(1.0, ScalingRegime::ridgeless), 1.0);
    EXPECT_LT(scaling_exponent(1e-9, ScalingRegime::ek), 1e-8);
    EXPECT_THROW(scaling_exponent(0.0, ScalingRegime::ek), InvalidArgument);
}

TEST(LearnabilityThreshold, Examples) {
    EXPECT_DOUBLE_EQ(learnability_threshold(0, 50, 0.7, 2.0), 1.4);
    EXPECT_NEAR(learnability_threshold(3, 27, 1.0), 2.0e4, 0.02 * 2.0e4);
    EXPECT_DOUBLE_EQ(learnability_threshold(1, 10, 1.0), 10.0);
    // flat linear kernel with lambda = 1/d crosses learnability 1/2 at P = d
    const auto r = ek_predict(flat(10), std::vector<double>(10, 1.0), 10.0, 1.0);
    EXPECT_NEAR(r.learnability(0), 0.5, 1e-15);
}

// ---- properties ----

TEST(CurvesProperties, FixedPointResidualAndBisectionAgree) {
    for (double alpha : {0.5, 1.0, 2.0})
        for (double P : {10.0, 300.0})
            for (double k2 : {0.0, 0.05, 2.0}) {
                const auto lam = powerlaw_spectrum(alpha, 1.0, 5000);
                const auto it = effective_ridge_solve(lam, P, k2);
                const auto bi = effective_ridge_bisect(lam, P, k2);
                EXPECT_LT(it.residual, 1e-10);
                EXPECT_NEAR(it.kappa_eff2, bi.kappa_eff2, 1e-9 * bi.kappa_eff2) << alpha << " " << P << " " << k2;
                EXPECT_GE(it.kappa_eff2, k2);
            }
}

TEST(CurvesProperties, EffectiveRidgeMonotone) {
    const auto lam = powerlaw_spectrum(1.2, 1.0, 3000);
    double prev = std::numeric_limits<double>::infinity();
    for (double P = 4; P <= 2048; P *= 2) {
        const double k = effective_ridge_solve(lam, P, 0.1).kappa_eff2;
        EXPECT_LE(k, prev * (1 + 1e-12));
        prev = k;
    }
    prev = 0;
    for (double k2 : {0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0}) {
        const double k = effective_ridge_solve(lam, 64, k2).kappa_eff2;
        EXPECT_GE(k, prev * (1 - 1e-12));
        prev = k;
    }
}

TEST(CurvesProperties, LearnabilityBoundedAndOrdered) {
    const auto lam = powerlaw_spectrum(1.0, 1.0, 500);
    const auto r = effective_ridge_predict(lam, powerlaw_targets(lam), 40, 0.01);
    for (Eigen::Index k = 0; k < r.learnability.size(); ++k) {
        EXPECT_GE(r.learnability(k), 0);
        EXPECT_LT(r.learnability(k), 1);
        if (k > 0) EXPECT_LE(r.learnability(k), r.learnability(k - 1));
        EXPECT_DOUBLE_EQ(r.mean_mode(k), r.learnability(k) * std::sqrt(lam[std::size_t(k)]));
    }
}

TEST(CurvesProperties, RgRidgeIsBarePlusTail) {
    for (double alpha : {0.5, 1.0, 2.0})
        for (double P : {32.0, 1024.0}) {
            const auto lam = powerlaw_spectrum(alpha, 1.0, 100000);
            const auto r = rg_flow(lam, powerlaw_targets(lam), P, 0.1);
            double tail = 0;
            for (std::size_t k = r.cutoff; k < lam.size(); ++k) tail += lam[k];
            EXPECT_NEAR(r.kappa_rg2, 0.1 + tail, 1e-14 * r.kappa_rg2);
            for (std::size_t i = 1; i < r.trajectory.size(); ++i)
                EXPECT_GT(r.trajectory[i].second, r.trajectory[i - 1].second);
        }
}

TEST(CurvesProperties, RgThenEffectiveRidgeMatchesFullSolve) {
    for (double alpha : {0.5, 1.0, 2.0})
        for (double P : {32.0, 128.0, 1024.0})
            for (double k2 : {0.0, 0.01}) {
                const auto lam = powerlaw_spectrum(alpha, 1.0, 1000000);
                const auto y = powerlaw_targets(lam);
                const auto rg = rg_predict(lam, y, P, k2);
                const auto er = effective_ridge_predict(lam, y, P, k2);
                EXPECT_NEAR(rg.closure.loss, er.loss, 1e-3 * er.loss) << alpha << " " << P << " " << k2;
                EXPECT_NEAR(rg.ek.loss, rg.ek.bias + rg.ek.variance, 1e-15);
            }
}

TEST(CurvesProperties, EkAtEffectiveRidgeReproducesMean) {
    const auto lam = powerlaw_spectrum(1.3, 1.0, 2000);
    const auto y = powerlaw_targets(lam);
    const auto er = effective_ridge_predict(lam, y, 100, 0.02);
    const auto ek = ek_predict(lam, y, 100, er.kappa_eff2);
    EXPECT_LT((ek.mean_mode - er.mean_mode).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_NEAR(ek.bias, er.bias, 1e-12);
}

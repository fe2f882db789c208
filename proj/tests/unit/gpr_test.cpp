#include "kerneltheory/gpr.hpp"
#include "kerneltheory/kernels.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace kt;

namespace {

struct Problem {
    Matrix full, K, Ks;
    Vector kss, y;
};

Problem make_problem(int P, int T, int d, std::uint64_t seed, Activation act = Activation::erf) {
    const Matrix X = oracle::random_points(P + T, d, seed);
    const auto spec = NetworkSpec::fcn(d, act);
    const Matrix K = nngp_kernel(spec, X);
    Problem p;
    p.full = K;
    p.K = K.topLeftCorner(P, P);
    p.Ks = K.bottomLeftCorner(T, P);
    p.kss = K.bottomRightCorner(T, T).diagonal();
    p.y = oracle::random_points(P, 1, seed + 100).col(0);
    return p;
}

}  // namespace

TEST(GprPredict, NoDataGivesThePrior) {
    const Vector kss = Vector::Constant(3, 2.0);
    const auto post = gpr_predict(Matrix(0, 0), Matrix(3, 0), kss, Vector(0), 1.0);
    EXPECT_EQ(post.mean, Vector::Zero(3));
    EXPECT_EQ(post.variance, kss);
}

TEST(GprPredict, InterpolatesWithoutRidge) {
    const auto p = make_problem(12, 0, 4, 1);
    const auto post = gpr_predict(p.K, p.K, p.K.diagonal(), p.y, 0.0);
    EXPECT_LT((post.mean - p.y).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT(post.variance.maxCoeff(), 1e-8);
    EXPECT_LT(post.train_residual.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(GprPredict, RidgeShrinksTheMean) {
    const auto p = make_problem(10, 5, 3, 2);
    double prev = std::numeric_limits<double>::infinity();
    for (double k2 : {1.0, 10.0, 100.0}) {
        const double n = gpr_predict(p.K, p.Ks, p.kss, p.y, k2).mean.norm();
        EXPECT_LT(n, prev);
        prev = n;
    }
}

TEST(GprPredict, SingularSystemNeedsPseudoInverse) {
    const Matrix X = oracle::random_points(8, 3, 3);
    const Matrix K = X * X.transpose();  // rank 3
    const Vector y = X * Vector::Ones(3);
    try {
        gpr_predict(K, K, K.diagonal(), y, 0.0);
        FAIL() << "expected RankDeficientError";
    } catch (const RankDeficientError& e) {
        EXPECT_EQ(e.rank(), 3);
    }
    const auto post = gpr_predict(K, K, K.diagonal(), y, 0.0, {.allow_pseudo_inverse = true});
    EXPECT_TRUE(post.pseudo_inverse);
    EXPECT_EQ(post.rank, 3);
    EXPECT_LT((post.mean - y).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(GprPredict, RejectsBadInput) {
    const auto p = make_problem(4, 2, 2, 4);
    EXPECT_THROW(gpr_predict(p.K, p.Ks, p.kss, p.y, -1.0), InvalidArgument);
    EXPECT_THROW(gpr_predict(p.K, p.Ks, p.kss, Vector::Zero(3), 1.0), InvalidArgument);
    EXPECT_THROW(gpr_predict(p.K, p.Ks.transpose(), p.kss, p.y, 1.0), InvalidArgument);
}

TEST(NtkInfiniteTime, ZeroInitialisationIsRidgelessRegression) {
    const auto p = make_problem(9, 4, 3, 5, Activation::relu);
    const auto out = ntk_infinite_time(p.K, p.Ks, p.y, Vector::Zero(9), Vector::Zero(4));
    const auto post = gpr_predict(p.K, p.Ks, p.kss, p.y, 0.0);
    EXPECT_LT((out.prediction - post.mean).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_EQ(out.init_term, Vector::Zero(4));
}

TEST(NtkInfiniteTime, InitTermVanishesOnTrainPoints) {
    const auto p = make_problem(7, 0, 3, 6);
    const Vector f0 = oracle::random_points(7, 1, 7).col(0);
    const auto out = ntk_infinite_time(p.K, p.K, p.y, f0, f0);
    EXPECT_LT(out.init_term.cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((out.prediction - p.y).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(NtkInfiniteTime, InitTermAveragesOutOverPriorDraws) {
    const int P = 6, T = 3, draws = 200;
    const auto p = make_problem(P, T, 3, 8);
    const Matrix L = Eigen::LLT<Matrix>(p.full).matrixL();
    CounterRng rng({9, 1});
    Vector mean = Vector::Zero(T);
    Vector second = Vector::Zero(T);
    for (int s = 0; s < draws; ++s) {
        const Vector f0 = L * rng.normal_vector(P + T);
        const auto out = ntk_infinite_time(p.K, p.Ks, p.y, f0.head(P), f0.tail(T));
        mean += out.init_term / draws;
        second += out.init_term.cwiseAbs2() / draws;
    }
    // standard error of the mean of I_0 per test point
    const Vector se = ((second - mean.cwiseAbs2()).cwiseMax(0.0) / draws).cwiseSqrt();
    for (int t = 0; t < T; ++t) EXPECT_LT(std::abs(mean(t)), 4 * se(t) + 1e-12) << t;
    // and its variance is the GPR posterior variance
    const Vector post_var = gpr_predict(p.K, p.Ks, p.kss, p.y, 0.0).variance;
    for (int t = 0; t < T; ++t) EXPECT_NEAR(second(t), post_var(t), 0.35 * post_var(t) + 1e-10) << t;
}

TEST(LossDecompose, Examples) {
    Matrix pred(2, 2);
    pred << 1, 0, 3, 0;
    Vector y(2);
    y << 2, 1;
    const auto l = loss_decompose(pred, y, Vector::Constant(2, 0.5));
    EXPECT_DOUBLE_EQ(l.bias, 0.5 * 0 + 0.5 * 1);
    EXPECT_DOUBLE_EQ(l.variance, 0.5 * 1);
    EXPECT_DOUBLE_EQ(l.total, l.bias + l.variance);
    EXPECT_THROW(loss_decompose(pred.topRows(1), y, Vector::Constant(2, 0.5)), InvalidArgument);
}

TEST(LossDecompose, IdenticalDrawsHaveNoVariance) {
    Matrix pred(3, 4);
    pred.rowwise() = Eigen::RowVector4d(1, 2, 3, 4);
    const auto l = loss_decompose(pred, Vector::Zero(4), Vector::Constant(4, 0.25));
    EXPECT_DOUBLE_EQ(l.variance, 0.0);
    EXPECT_DOUBLE_EQ(l.bias, 7.5);
}

// ---- properties ----

TEST(GprProperties, MeanIsLinearInTargets) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = make_problem(15, 6, 4, 20 + seed);
        const Vector y2 = oracle::random_points(15, 1, 40 + seed).col(0);
        const double a = 0.7, b = -1.3;
        const Vector lhs = gpr_predict(p.K, p.Ks, p.kss, a * p.y + b * y2, 0.1).mean;
        const Vector rhs = a * gpr_predict(p.K, p.Ks, p.kss, p.y, 0.1).mean + b * gpr_predict(p.K, p.Ks, p.kss, y2, 0.1).mean;
        EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-10 * (1 + rhs.cwiseAbs().maxCoeff()));
    }
}

TEST(GprProperties, PosteriorVarianceBelowPrior) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = make_problem(20, 10, 5, 60 + seed, seed % 2 ? Activation::relu : Activation::erf);
        for (double k2 : {0.0, 0.01, 1.0}) {
            const auto post = gpr_predict(p.K, p.Ks, p.kss, p.y, k2);
            EXPECT_TRUE((post.variance.array() >= 0).all());
            EXPECT_TRUE((post.variance.array() <= p.kss.array() + 1e-12).all());
        }
    }
}

TEST(GprProperties, MatchesExplicitInverse) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = make_problem(5, 3, 3, 80 + seed);
        const Vector ref = oracle::gpr_mean_explicit(p.K, p.Ks, p.y, 0.5);
        const Vector got = gpr_predict(p.K, p.Ks, p.kss, p.y, 0.5).mean;
        EXPECT_LT((ref - got).cwiseAbs().maxCoeff(), 1e-12 * (1 + ref.cwiseAbs().maxCoeff()));
    }
}

#pragma once

#include "kerneltheory/common.hpp"
#include "kerneltheory/gpr.hpp"
#include "kerneltheory/kernels.hpp"
#include "kerneltheory/rng.hpp"
#include "kerneltheory/spectral.hpp"

#include <limits>
#include <optional>

namespace kt {

struct TrainingConfig {
    double step = 0.0;           // 0 selects step_fraction / (lambda_max(NTK at init) + T)
    double step_fraction = 0.05;
    double temperature = 0.0;
    std::size_t steps = 10000;
    std::size_t burn_in = 5000;
    std::size_t thin = 10;
    std::size_t seeds = 1;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    bool layerwise_steps = true;  // scale each layer's step by its prior variance

    void validate() const {
        require(step >= 0 && step_fraction > 0, "training: step must be non-negative");
        require(temperature >= 0, "training: temperature must be non-negative");
        require(burn_in < steps, "training: burn-in must be shorter than the run");
        require(thin >= 1, "training: thin must be >= 1");
        require(seeds >= 1, "training: need at least one seed");
    }
};

struct EnsembleStats {
    Vector mean;                   // test outputs averaged over samples and seeds
    Vector variance;               // variance of test outputs over samples and seeds
    Matrix per_seed_mean;          // seeds x test
    Vector train_mean;
    std::vector<std::vector<double>> loss_trace;  // per seed, data loss every `thin` steps
    double step = 0.0;
    std::size_t samples_per_seed = 0;
    double split_half_z = 0.0;     // max |first half - second half| / standard error
    bool equilibrated = false;
};

// Two-layer network f(x) = sum_i sum_c A_ic sigma(W_c . x_i) with shared filters.
struct TwoLayerParams {
    Matrix W;  // C x S
    Matrix A;  // N_w x C
};

namespace detail {

struct LayerVariances {
    double w = 0.0;
    double a = 0.0;
};

inline LayerVariances prior_variances(const NetworkSpec& spec) {
    return {spec.weight_var / spec.fan(), spec.output_factor() / (spec.patch_count * spec.channels)};
}

inline void check_trainable(const NetworkSpec& spec) {
    spec.validate();
    require(spec.depth == 2, "langevin_train: two-layer networks only");
    require(spec.bias_var == 0.0, "langevin_train: biases are not trained");
}

inline Vector forward(const NetworkSpec& spec, const TwoLayerParams& p, const Matrix& X) {
    const int S = spec.patch_size;
    Vector f = Vector::Zero(X.rows());
    if (spec.activation == Activation::linear) {
        const Matrix V = p.A * p.W;  // N_w x S
        for (int i = 0; i < spec.patch_count; ++i)
            f.noalias() += X.middleCols(static_cast<Eigen::Index>(i) * S, S) * V.row(i).transpose();
        return f;
    }
    for (int i = 0; i < spec.patch_count; ++i) {
        const Matrix H = X.middleCols(static_cast<Eigen::Index>(i) * S, S) * p.W.transpose();
        const Matrix act = H.unaryExpr([&](double z) { return activate(spec.activation, z); });
        f.noalias() += act * p.A.row(i).transpose();
    }
    return f;
}

// Gradient of 1/2 sum (f - y)^2 with respect to W and A, given residual r = f - y.
inline void data_gradient(const NetworkSpec& spec, const TwoLayerParams& p, const Matrix& X, const Vector& r,
                          Matrix& gW, Matrix& gA) {
    const int S = spec.patch_size;
    gW.setZero(p.W.rows(), p.W.cols());
    gA.setZero(p.A.rows(), p.A.cols());
    if (spec.activation == Activation::linear) {
        Matrix G(spec.patch_count, S);
        for (int i = 0; i < spec.patch_count; ++i)
            G.row(i) = (X.middleCols(static_cast<Eigen::Index>(i) * S, S).transpose() * r).transpose();
        gA.noalias() = G * p.W.transpose();
        gW.noalias() = p.A.transpose() * G;
        return;
    }
    for (int i = 0; i < spec.patch_count; ++i) {
        const auto Xi = X.middleCols(static_cast<Eigen::Index>(i) * S, S);
        const Matrix H = Xi * p.W.transpose();  // P x C
        const Matrix act = H.unaryExpr([&](double z) { return activate(spec.activation, z); });
        const Matrix der = H.unaryExpr([&](double z) { return activate_derivative(spec.activation, z); });
        gA.row(i) = r.transpose() * act;
        const Matrix back = (r * p.A.row(i)).cwiseProduct(der);  // P x C
        gW.noalias() += back.transpose() * Xi;
    }
}

inline TwoLayerParams sample_prior(const NetworkSpec& spec, CounterRng& rng) {
    const auto v = prior_variances(spec);
    TwoLayerParams p;
    p.W = rng.normal_matrix(spec.channels, spec.patch_size, std::sqrt(v.w));
    p.A = rng.normal_matrix(spec.patch_count, spec.channels, std::sqrt(v.a));
    return p;
}

}  // namespace detail

// Empirical NTK with the parameters scaled by their prior standard deviations:
// Theta = var_w J_W J_W' + var_A J_A J_A'.
inline Matrix empirical_ntk(const NetworkSpec& spec, const TwoLayerParams& p, const Matrix& X) {
    const auto P = X.rows();
    const auto v = detail::prior_variances(spec);
    const int S = spec.patch_size, C = spec.channels;
    Matrix JA(P, static_cast<Eigen::Index>(spec.patch_count) * C);
    Matrix JW = Matrix::Zero(P, static_cast<Eigen::Index>(C) * S);
    for (int i = 0; i < spec.patch_count; ++i) {
        const auto Xi = X.middleCols(static_cast<Eigen::Index>(i) * S, S);
        const Matrix H = Xi * p.W.transpose();
        for (Eigen::Index mu = 0; mu < P; ++mu) {
            for (int c = 0; c < C; ++c) {
                const double h = H(mu, c);
                JA(mu, static_cast<Eigen::Index>(i) * C + c) = activate(spec.activation, h);
                const double g = p.A(i, c) * activate_derivative(spec.activation, h);
                JW.row(mu).segment(static_cast<Eigen::Index>(c) * S, S) += g * Xi.row(mu);
            }
        }
    }
    return v.a * JA * JA.transpose() + v.w * JW * JW.transpose();
}

struct LangevinChain {
    Vector test_sum, test_sq, train_sum;
    Vector first_half, second_half;
    std::vector<double> loss_trace;
    std::size_t samples = 0;
};

// One Euler-Maruyama chain of theta <- theta - eta M grad L + sqrt(2 T eta M) xi, with
// L = 1/2 sum (f - y)^2 + T |theta_l|^2 / (2 var_l) and M = diag(var_l) (or I).
inline LangevinChain langevin_chain(const NetworkSpec& spec, const Matrix& X, const Vector& y, const Matrix& X_test,
                                    const TrainingConfig& cfg, double step, std::uint64_t seed_index) {
    const auto v = detail::prior_variances(spec);
    const double T = cfg.temperature;
    const double mw = cfg.layerwise_steps ? v.w : 1.0;
    const double ma = cfg.layerwise_steps ? v.a : 1.0;
    CounterRng init({cfg.seed, seed_index, std::numeric_limits<std::uint64_t>::max()});
    TwoLayerParams p = detail::sample_prior(spec, init);
    Matrix gW, gA;
    LangevinChain out;
    const auto n_test = X_test.rows();
    out.test_sum = Vector::Zero(n_test);
    out.test_sq = Vector::Zero(n_test);
    out.train_sum = Vector::Zero(X.rows());
    out.first_half = Vector::Zero(n_test);
    out.second_half = Vector::Zero(n_test);
    const std::size_t total_samples = (cfg.steps - cfg.burn_in) / cfg.thin;
    std::size_t first_count = 0;
    double initial_loss = -1;
    const double noise_w = std::sqrt(2.0 * T * step * mw);
    const double noise_a = std::sqrt(2.0 * T * step * ma);
    for (std::size_t t = 0; t < cfg.steps; ++t) {
        const Vector f = detail::forward(spec, p, X);
        const Vector r = f - y;
        const double loss = 0.5 * r.squaredNorm();
        if (initial_loss < 0) initial_loss = std::max(loss, 1e-12);
        if (!std::isfinite(loss) || loss > 1e6 * initial_loss)
            throw NumericalError("langevin_train: diverged at step " + std::to_string(t) + " of seed " +
                                 std::to_string(seed_index) + " (loss " + std::to_string(loss) + ", initial " +
                                 std::to_string(initial_loss) + "); reduce the step");
        if (t % cfg.thin == 0) out.loss_trace.push_back(loss);
        if (t >= cfg.burn_in && (t - cfg.burn_in) % cfg.thin == 0 && out.samples < total_samples) {
            const Vector ft = detail::forward(spec, p, X_test);
            out.test_sum += ft;
            out.test_sq += ft.cwiseAbs2();
            out.train_sum += f;
            if (out.samples < total_samples / 2) {
                out.first_half += ft;
                ++first_count;
            } else {
                out.second_half += ft;
            }
            ++out.samples;
        }
        detail::data_gradient(spec, p, X, r, gW, gA);
        CounterRng noise({cfg.seed, seed_index, t});
        if (T > 0) {
            gW += (T / v.w) * p.W;
            gA += (T / v.a) * p.A;
        }
        p.W -= (step * mw) * gW;
        p.A -= (step * ma) * gA;
        if (T > 0) {
            p.W += noise.normal_matrix(p.W.rows(), p.W.cols(), noise_w);
            p.A += noise.normal_matrix(p.A.rows(), p.A.cols(), noise_a);
        }
    }
    if (first_count > 0) out.first_half /= static_cast<double>(first_count);
    if (out.samples > first_count) out.second_half /= static_cast<double>(out.samples - first_count);
    return out;
}

// Step size from the empirical NTK at the first seed's initialisation.
inline double langevin_auto_step(const NetworkSpec& spec, const Matrix& X, const TrainingConfig& cfg) {
    CounterRng init({cfg.seed, 0, std::numeric_limits<std::uint64_t>::max()});
    const auto p = detail::sample_prior(spec, init);
    Matrix Theta = empirical_ntk(spec, p, X);
    if (!cfg.layerwise_steps) {
        const auto v = detail::prior_variances(spec);
        Theta /= std::min(v.a, v.w);
    }
    const double top = X.rows() > 0 ? Eigen::SelfAdjointEigenSolver<Matrix>(Theta).eigenvalues().maxCoeff() : 0.0;
    const auto v = detail::prior_variances(spec);
    const double prior_curv = cfg.layerwise_steps ? cfg.temperature : cfg.temperature / std::min(v.a, v.w);
    return cfg.step_fraction / std::max(top + prior_curv, 1e-300);
}

// Ensemble of Langevin chains over `cfg.seeds` seeds.
inline EnsembleStats langevin_train(const NetworkSpec& spec, const Matrix& X, const Vector& y, const Matrix& X_test,
                                    const TrainingConfig& cfg) {
    detail::check_trainable(spec);
    cfg.validate();
    require(X.rows() == y.size(), "langevin_train: data and targets differ in size");
    require(X.cols() == spec.input_dim && X_test.cols() == spec.input_dim, "langevin_train: input width mismatch");
    const double step = cfg.step > 0 ? cfg.step : langevin_auto_step(spec, X, cfg);
    std::vector<LangevinChain> chains(cfg.seeds);
    parallel_for(cfg.seeds, cfg.threads, [&](std::size_t s) { chains[s] = langevin_chain(spec, X, y, X_test, cfg, step, s); });

    EnsembleStats out;
    out.step = step;
    const auto n_test = X_test.rows();
    const auto n_seeds = static_cast<Eigen::Index>(cfg.seeds);
    out.samples_per_seed = chains.front().samples;
    require(out.samples_per_seed >= 1, "langevin_train: no samples after burn-in");
    const double ns = static_cast<double>(out.samples_per_seed);
    out.per_seed_mean.resize(n_seeds, n_test);
    Vector sq = Vector::Zero(n_test);
    out.train_mean = Vector::Zero(X.rows());
    Matrix first(n_seeds, n_test), second(n_seeds, n_test);
    for (Eigen::Index s = 0; s < n_seeds; ++s) {
        const auto& c = chains[static_cast<std::size_t>(s)];
        out.per_seed_mean.row(s) = (c.test_sum / ns).transpose();
        sq += c.test_sq / ns;
        out.train_mean += c.train_sum / ns;
        first.row(s) = c.first_half.transpose();
        second.row(s) = c.second_half.transpose();
        out.loss_trace.push_back(c.loss_trace);
    }
    out.train_mean /= static_cast<double>(n_seeds);
    out.mean = out.per_seed_mean.colwise().mean().transpose();
    out.variance = (sq / static_cast<double>(n_seeds) - out.mean.cwiseAbs2()).cwiseMax(0.0);
    // Split-half diagnostic: difference of half means against its seed-to-seed standard error.
    if (out.samples_per_seed >= 2) {
        const Matrix diff = first - second;
        const Vector dmean = diff.colwise().mean().transpose();
        double z = 0;
        for (Eigen::Index j = 0; j < n_test; ++j) {
            double se;
            if (n_seeds >= 2) {
                const double var = (diff.col(j).array() - dmean(j)).square().sum() / static_cast<double>(n_seeds - 1);
                se = std::sqrt(var / static_cast<double>(n_seeds));
            } else {
                se = std::sqrt(out.variance(j) * 4.0 / ns);
            }
            if (se > 0) z = std::max(z, std::abs(dmean(j)) / se);
            else if (dmean(j) != 0) z = std::numeric_limits<double>::infinity();
        }
        out.split_half_z = z;
        // max over test points of |z|; ~1 sigma per point is declared equilibrated up to a sqrt(2 log n) allowance
        out.equilibrated = z <= std::max(1.0, std::sqrt(2.0 * std::log(static_cast<double>(std::max<Eigen::Index>(n_test, 2)))));
    }
    return out;
}

// Weighted learnability sum w f y / sum w y^2.
inline double learnability(const Vector& f, const Vector& y, const Vector& weights) {
    require(f.size() == y.size() && y.size() == weights.size(), "learnability: dimension mismatch");
    const double den = (weights.array() * y.array().square()).sum();
    if (!(den > 0)) throw InvalidArgument("learnability: target is identically zero");
    return (weights.array() * f.array() * y.array()).sum() / den;
}

inline double learnability(const Vector& f, const Vector& y) {
    return learnability(f, y, Vector::Constant(y.size(), 1.0 / static_cast<double>(std::max<Eigen::Index>(y.size(), 1))));
}

enum class SyntheticKind { gaussian_iid, hypersphere_uniform };

inline SyntheticKind parse_synthetic_kind(std::string_view s) {
    if (s == "gaussian_iid") return SyntheticKind::gaussian_iid;
    if (s == "hypersphere_uniform") return SyntheticKind::hypersphere_uniform;
    throw InvalidArgument("unknown data kind: " + std::string(s));
}

// n points in R^d with uniform weights: N(0, I/d) or uniform on the unit sphere.
inline DataMeasure make_synthetic(SyntheticKind kind, int d, int n, std::uint64_t seed) {
    require(d >= 1 && n >= 1, "make_synthetic: d and n must be >= 1");
    CounterRng rng({seed, 0x64617461});
    Matrix X = rng.normal_matrix(n, d, 1.0 / std::sqrt(static_cast<double>(d)));
    if (kind == SyntheticKind::hypersphere_uniform) {
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
            const double nrm = X.row(i).norm();
            if (nrm == 0) throw NumericalError("make_synthetic: zero-norm draw");
            X.row(i) /= nrm;
        }
    }
    return DataMeasure::uniform(std::move(X));
}

enum class TargetKind { single_index_linear, patch_linear, cubic_single_index };

inline TargetKind parse_target_kind(std::string_view s) {
    if (s == "single_index_linear") return TargetKind::single_index_linear;
    if (s == "patch_linear") return TargetKind::patch_linear;
    if (s == "cubic_single_index" || s == "cubic") return TargetKind::cubic_single_index;
    throw InvalidArgument("unknown target kind: " + std::string(s));
}

struct TargetParams {
    Vector w_star;         // length d (single index) or S (patch)
    Vector a_star;         // length N_w (patch); empty means 1/sqrt(N_w) each
    double cubic_coef = 0.1;
};

inline Vector make_target(TargetKind kind, const TargetParams& tp, const Matrix& X) {
    const auto S = tp.w_star.size();
    require(S > 0, "make_target: teacher direction is empty");
    if (kind == TargetKind::patch_linear) {
        require(X.cols() % S == 0, "make_target: input width is not a multiple of the patch size");
        const auto nw = X.cols() / S;
        Vector a = tp.a_star.size() ? tp.a_star : Vector::Constant(nw, 1.0 / std::sqrt(static_cast<double>(nw)));
        require(a.size() == nw, "make_target: readout teacher length differs from the patch count");
        Vector y = Vector::Zero(X.rows());
        for (Eigen::Index i = 0; i < nw; ++i) y += a(i) * (X.middleCols(i * S, S) * tp.w_star);
        return y;
    }
    require(X.cols() == S, "make_target: teacher direction and input width differ");
    const Vector z = X * tp.w_star;
    if (kind == TargetKind::single_index_linear) return z;
    return z.unaryExpr([&](double u) { return u + tp.cubic_coef * (u * u * u - 3.0 * u); });
}

struct DatasetAverage {
    Vector mean;               // averaged predictor on the evaluation basis
    double bias = 0.0;         // sum w (mean - y)^2
    double dataset_variance = 0.0;    // type (ii): across-draw variance of the predictor
    double posterior_variance = 0.0;  // type (i): within-draw posterior variance, averaged
    double loss = 0.0;         // averaged test error of single-draw predictors
    std::size_t draws = 0;
};

// One dataset draw evaluated on a fixed test basis.
struct DatasetDraw {
    Matrix K_train;     // P x P
    Matrix K_cross;     // test x P
    Vector k_test;      // prior variances on the test basis
    Vector y_train;
};

// Dataset-averaged GPR by Monte Carlo over draws produced by sampler(draw_index, rng).
inline DatasetAverage dataset_averaged_gpr_mc(const std::function<DatasetDraw(std::size_t, CounterRng&)>& sampler,
                                              const Vector& y_test, const Vector& test_weights, double kappa2,
                                              std::size_t draws, std::uint64_t seed, unsigned threads = 1) {
    require(draws >= 2, "dataset_averaged_gpr_mc: at least two draws are required");
    require(y_test.size() == test_weights.size(), "dataset_averaged_gpr_mc: test basis mismatch");
    Matrix preds(static_cast<Eigen::Index>(draws), y_test.size());
    std::vector<double> post(draws);
    parallel_for(draws, threads, [&](std::size_t d) {
        CounterRng rng({seed, 0x67707264, d});
        const DatasetDraw dr = sampler(d, rng);
        const auto gp = gpr_predict(dr.K_train, dr.K_cross, dr.k_test, dr.y_train, kappa2, {.allow_pseudo_inverse = true});
        preds.row(static_cast<Eigen::Index>(d)) = gp.mean.transpose();
        post[d] = test_weights.dot(gp.variance);
    });
    const auto dec = loss_decompose(preds, y_test, test_weights);
    DatasetAverage out;
    out.mean = preds.colwise().mean().transpose();
    out.bias = dec.bias;
    out.dataset_variance = dec.variance;
    out.loss = dec.total;
    double s = 0;
    for (double p : post) s += p;
    out.posterior_variance = s / static_cast<double>(draws);
    out.draws = draws;
    return out;
}

// Gaussian-feature model: P samples with features phi_k(x) ~ N(0,1) iid across k, kernel
// K = Phi Lambda Phi'. The test basis is the eigenmode basis, so the loss is exact in x.
inline DatasetAverage gaussian_features_gpr_mc(std::span<const double> lambda, std::span<const double> y, int P,
                                               double kappa2, std::size_t draws, std::uint64_t seed,
                                               unsigned threads = 1) {
    require(lambda.size() == y.size() && !lambda.empty(), "gaussian_features_gpr_mc: spectrum/target mismatch");
    require(P >= 1, "gaussian_features_gpr_mc: P must be >= 1");
    const auto M = static_cast<Eigen::Index>(lambda.size());
    const Vector lam = Eigen::Map<const Vector>(lambda.data(), M);
    const Vector yk = Eigen::Map<const Vector>(y.data(), M);
    auto sampler = [&](std::size_t, CounterRng& rng) {
        const Matrix Phi = rng.normal_matrix(P, M);
        const Matrix PhiL = Phi * lam.asDiagonal();
        DatasetDraw d;
        d.K_train = PhiL * Phi.transpose();
        d.K_cross = PhiL.transpose();  // mode k of the predictor: lambda_k phi_k' alpha
        d.k_test = lam;
        d.y_train = Phi * yk;
        return d;
    };
    return dataset_averaged_gpr_mc(sampler, yk, Vector::Ones(M), kappa2, draws, seed, threads);
}

}  // namespace kt

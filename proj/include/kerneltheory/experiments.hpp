#pragma once

// Reduced-scale theory-vs-oracle setups shared by the command line and the test suites.

#include "kerneltheory/curves.hpp"
#include "kerneltheory/dynamics.hpp"
#include "kerneltheory/empirical.hpp"
#include "kerneltheory/feature.hpp"
#include "kerneltheory/gpr.hpp"
#include "kerneltheory/kernels.hpp"
#include "kerneltheory/spectral.hpp"

namespace kt {

// Power-law spectrum with targets y_k = lambda_k^power.
struct SpectralProblem {
    std::vector<double> lambda;
    std::vector<double> y;
};

inline SpectralProblem powerlaw_problem(double alpha, std::size_t count, double lambda1 = 1.0, double target_power = 0.5) {
    SpectralProblem p;
    p.lambda = powerlaw_spectrum(alpha, lambda1, count);
    p.y.resize(count);
    for (std::size_t k = 0; k < count; ++k) p.y[k] = std::pow(p.lambda[k], target_power);
    return p;
}

inline std::vector<double> geometric_sweep(double lo, double hi, double factor) {
    require(lo > 0 && hi >= lo && factor > 1, "sweep: need 0 < lo <= hi and factor > 1");
    std::vector<double> out;
    for (double v = lo; v <= hi * (1 + 1e-12); v *= factor) out.push_back(std::round(v));
    return out;
}

// Train/test inputs and single-index targets y = sqrt(d) e_1 . x (unit variance for N(0, I/d) inputs).
struct TeacherProblem {
    Matrix X_train, X_test;
    Vector y_train, y_test;
};

inline TeacherProblem make_teacher_problem(const NetworkSpec& spec, SyntheticKind kind, TargetKind target, int n_train,
                                           int n_test, std::uint64_t seed) {
    spec.validate();
    TeacherProblem p;
    p.X_train = make_synthetic(kind, spec.input_dim, n_train, derive_key({seed, 1})).points;
    p.X_test = make_synthetic(kind, spec.input_dim, n_test, derive_key({seed, 2})).points;
    TargetParams tp;
    const int len = target == TargetKind::patch_linear ? spec.patch_size : spec.input_dim;
    tp.w_star = Vector::Zero(len);
    tp.w_star(0) = std::sqrt(static_cast<double>(spec.input_dim));
    p.y_train = make_target(target, tp, p.X_train);
    p.y_test = make_target(target, tp, p.X_test);
    return p;
}

struct GprVsTrain {
    GPRPosterior gpr;
    EnsembleStats ensemble;
    double relative_rmse = 0.0;  // ||ensemble mean - GPR mean|| / ||GPR mean|| on the test set
};

// Langevin ensemble at temperature T against GPR with the NNGP kernel and ridge T.
inline GprVsTrain gpr_vs_train(const NetworkSpec& spec, const TeacherProblem& p, const TrainingConfig& cfg) {
    const Matrix K = nngp_kernel(spec, p.X_train);
    const Matrix Ks = nngp_cross_kernel(spec, p.X_test, p.X_train);
    const Vector kss = nngp_cross_kernel(spec, p.X_test, p.X_test).diagonal();
    GprVsTrain out;
    out.gpr = gpr_predict(K, Ks, kss, p.y_train, cfg.temperature);
    out.ensemble = langevin_train(spec, p.X_train, p.y_train, p.X_test, cfg);
    out.relative_rmse = (out.ensemble.mean - out.gpr.mean).norm() / std::max(out.gpr.mean.norm(), 1e-300);
    return out;
}

struct CurveVsMcRow {
    double P = 0;
    LearningCurvePrediction theory;
    DatasetAverage mc;
    double loss_deviation = 0;      // theory / mc - 1
    double variance_deviation = 0;  // type (ii)
};

inline std::vector<CurveVsMcRow> curve_vs_mc(const SpectralProblem& sp, std::span<const double> Ps, double kappa2,
                                             std::size_t draws, std::uint64_t seed, unsigned threads) {
    std::vector<CurveVsMcRow> rows(Ps.size());
    for (std::size_t i = 0; i < Ps.size(); ++i) {
        auto& r = rows[i];
        r.P = Ps[i];
        r.theory = effective_ridge_predict(sp.lambda, sp.y, r.P, kappa2);
        r.mc = gaussian_features_gpr_mc(sp.lambda, sp.y, static_cast<int>(r.P), kappa2, draws, derive_key({seed, i}),
                                        threads);
        r.loss_deviation = r.theory.loss / r.mc.loss - 1.0;
        r.variance_deviation = r.theory.dataset_variance / r.mc.dataset_variance - 1.0;
    }
    return rows;
}

struct RgVsRidgeRow {
    double P = 0;
    RGPrediction rg;
    LearningCurvePrediction ridge;
    double deviation = 0;  // closure loss / effective-ridge loss - 1
};

inline std::vector<RgVsRidgeRow> rg_vs_ridge(const SpectralProblem& sp, std::span<const double> Ps, double kappa2,
                                             double epsilon, unsigned threads = 1) {
    std::vector<RgVsRidgeRow> rows(Ps.size());
    parallel_for(Ps.size(), threads, [&](std::size_t i) {
        auto& r = rows[i];
        r.P = Ps[i];
        r.rg = rg_predict(sp.lambda, sp.y, r.P, kappa2, epsilon);
        r.ridge = effective_ridge_predict(sp.lambda, sp.y, r.P, kappa2);
        r.deviation = r.rg.closure.loss / r.ridge.loss - 1.0;
    });
    return rows;
}

struct ScalingFit {
    double alpha = 0;
    ScalingRegime regime = ScalingRegime::ridgeless;
    double slope = 0;
    double expected = 0;
    std::vector<double> P, loss;
};

// Ridgeless: effective-ridge loss at kappa2 = 0. EK: equivalent-kernel loss at fixed ridge.
inline ScalingFit scaling_fit(double alpha, ScalingRegime regime, std::span<const double> Ps, std::size_t modes,
                              double ek_kappa2 = 1.0) {
    const auto sp = powerlaw_problem(alpha, modes);
    ScalingFit fit;
    fit.alpha = alpha;
    fit.regime = regime;
    fit.expected = -scaling_exponent(alpha, regime);
    for (double P : Ps) {
        const double L = regime == ScalingRegime::ek ? ek_predict(sp.lambda, sp.y, P, ek_kappa2).loss
                                                      : effective_ridge_predict(sp.lambda, sp.y, P, 0.0).loss;
        fit.P.push_back(P);
        fit.loss.push_back(L);
    }
    fit.slope = loglog_slope(fit.P, fit.loss);
    return fit;
}

struct NngpVsMc {
    Matrix analytic, sampled;
    double max_abs_error = 0;
};

inline NngpVsMc nngp_vs_mc(const NetworkSpec& spec, const Matrix& X, std::size_t samples, std::uint64_t seed,
                           unsigned threads) {
    NngpVsMc out;
    out.analytic = nngp_kernel(spec, X);
    out.sampled = empirical_kernel_mc(spec, X, samples, seed, threads);
    out.max_abs_error = (out.analytic - out.sampled).cwiseAbs().maxCoeff();
    return out;
}

// Langevin ensembles with one fresh training set per dataset index; learnability and test
// error of each chain's mean predictor, averaged over datasets.
struct DatasetEnsemble {
    double learnability = 0;
    double learnability_stderr = 0;
    double mse = 0;
    std::vector<double> per_dataset;
};

using DatasetDrawFn = std::function<std::pair<Matrix, Vector>(std::size_t)>;

inline DatasetEnsemble dataset_ensemble(const NetworkSpec& spec, const DatasetDrawFn& draw, const Matrix& X_test,
                                        const Vector& y_test, const TrainingConfig& cfg, std::size_t datasets,
                                        unsigned threads = 1) {
    require(datasets >= 2, "dataset_ensemble: need at least two datasets");
    std::vector<double> learn(datasets), mse(datasets);
    parallel_for(datasets, threads, [&](std::size_t i) {
        const auto [X, y] = draw(i);
        auto c = cfg;
        c.seed = derive_key({cfg.seed, i});
        c.threads = 1;
        const auto e = langevin_train(spec, X, y, X_test, c);
        learn[i] = learnability(e.mean, y_test);
        mse[i] = (e.mean - y_test).squaredNorm() / static_cast<double>(y_test.size());
    });
    DatasetEnsemble out;
    const double n = static_cast<double>(datasets);
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < datasets; ++i) {
        s += learn[i];
        s2 += learn[i] * learn[i];
        out.mse += mse[i] / n;
    }
    out.learnability = s / n;
    out.learnability_stderr = std::sqrt(std::max(s2 / n - out.learnability * out.learnability, 0.0) / (n - 1));
    out.per_dataset = std::move(learn);
    return out;
}

struct KernelScalingVsTrainRow {
    double P = 0;
    KernelScalingSolution theory;
    double gp_learnability = 0;
    DatasetEnsemble ensemble;
    double deviation = 0;  // |theory - ensemble| learnability
};

// Two-layer linear FCN of width N on x ~ N(0, I/d) with y = sqrt(d) x_1 at T = kappa2:
// flat spectrum of d modes 1/d with the target on one mode.
inline std::vector<KernelScalingVsTrainRow> kernel_scaling_vs_train(int d, int N, double kappa2,
                                                                    std::span<const double> Ps, std::size_t datasets,
                                                                    int n_test, TrainingConfig cfg, std::uint64_t seed,
                                                                    unsigned threads = 1) {
    auto spec = NetworkSpec::fcn(d, Activation::linear);
    spec.channels = N;
    spec.input_scaling = InputScaling::unit;
    cfg.temperature = kappa2;
    const std::vector<double> lam(static_cast<std::size_t>(d), 1.0 / d);
    std::vector<double> ycoef(static_cast<std::size_t>(d), 0.0);
    ycoef[0] = 1.0;
    TargetParams tp;
    tp.w_star = Vector::Unit(d, 0) * std::sqrt(static_cast<double>(d));
    const Matrix X_test = make_synthetic(SyntheticKind::gaussian_iid, d, n_test, derive_key({seed, 0x74657374})).points;
    const Vector y_test = make_target(TargetKind::single_index_linear, tp, X_test);
    std::vector<KernelScalingVsTrainRow> rows(Ps.size());
    for (std::size_t j = 0; j < Ps.size(); ++j) {
        auto& r = rows[j];
        r.P = Ps[j];
        r.theory = kernel_scaling_solve(lam, ycoef, r.P, kappa2, N);
        r.gp_learnability = effective_ridge_predict(lam, ycoef, r.P, kappa2).learnability(0);
        const auto draw = [&](std::size_t i) {
            Matrix X = make_synthetic(SyntheticKind::gaussian_iid, d, static_cast<int>(r.P), derive_key({seed, j, i})).points;
            Vector y = make_target(TargetKind::single_index_linear, tp, X);
            return std::pair{std::move(X), std::move(y)};
        };
        cfg.seed = derive_key({seed, 0x6b73, j});
        r.ensemble = dataset_ensemble(spec, draw, X_test, y_test, cfg, datasets, threads);
        r.deviation = std::abs(r.theory.prediction.learnability(0) - r.ensemble.learnability);
    }
    return rows;
}

struct AdaptationVsTrainRow {
    double P = 0;
    AdaptationSolution theory;
    DatasetEnsemble ensemble;
    double deviation = 0;
};

struct AdaptationVsTrain {
    double d_in = 0;
    double P_half = 0;  // theory sample complexity at learnability 0.5
    std::vector<AdaptationVsTrainRow> rows;
};

// Two-layer linear CNN (N_w patches of size S, C channels, readout scale chi) on x ~ N(0, I)
// with the patch teacher w* = e_1, a*_i = 1/sqrt(N_w), at T = kappa2 / chi. Ensembles run at
// P = factor * P_half for each factor.
inline AdaptationVsTrain adaptation_vs_train(const AdaptationParams& base, double kappa2,
                                             std::span<const double> P_factors, std::size_t datasets, int n_test,
                                             TrainingConfig cfg, std::uint64_t seed, unsigned threads = 1) {
    const int S = static_cast<int>(base.S), Nw = static_cast<int>(base.N_w);
    require(S >= 1 && Nw >= 1 && base.S == S && base.N_w == Nw, "adaptation_vs_train: S and N_w must be integers");
    auto spec = NetworkSpec::cnn(Nw, S, Activation::linear);
    spec.channels = static_cast<int>(base.C);
    spec.output_scale = base.chi;
    cfg.temperature = kappa2 / base.chi;
    AdaptationVsTrain out;
    out.d_in = static_cast<double>(S) * Nw;
    out.P_half = adaptation_sample_complexity(Activation::linear, base, kappa2);
    TargetParams tp;
    tp.w_star = Vector::Unit(S, 0);
    const double scale = std::sqrt(out.d_in);
    const Matrix X_test =
        scale * make_synthetic(SyntheticKind::gaussian_iid, S * Nw, n_test, derive_key({seed, 0x74657374})).points;
    const Vector y_test = make_target(TargetKind::patch_linear, tp, X_test);
    for (std::size_t j = 0; j < P_factors.size(); ++j) {
        AdaptationVsTrainRow r;
        r.P = std::max(2.0, std::round(P_factors[j] * out.P_half));
        r.theory = adaptation_at(Activation::linear, base, r.P, kappa2);
        const auto draw = [&](std::size_t i) {
            Matrix X = scale * make_synthetic(SyntheticKind::gaussian_iid, S * Nw, static_cast<int>(r.P),
                                              derive_key({seed, j, i}))
                                   .points;
            Vector y = make_target(TargetKind::patch_linear, tp, X);
            return std::pair{std::move(X), std::move(y)};
        };
        cfg.seed = derive_key({seed, 0x6164, j});
        r.ensemble = dataset_ensemble(spec, draw, X_test, y_test, cfg, datasets, threads);
        r.deviation = std::abs(r.theory.learnability - r.ensemble.learnability);
        out.rows.push_back(std::move(r));
    }
    return out;
}

struct DynamicsLimits {
    LimitReport short_time, late_time;
    MeanPredictorTrajectory short_traj, late_traj;
    Matrix Theta0, K_gp;
};

// Short grid up to 0.1 / (eta ||Theta0||) against NTK flow; late grid up to
// late_factor * sigma^2 / (eta kappa2) against the GPR mean with the GP kernel.
inline DynamicsLimits dynamics_limits(const NetworkSpec& spec, const Matrix& X, const Vector& y,
                                      const DynamicsParams& dp, std::size_t short_steps, std::size_t late_steps,
                                      double late_factor = 50.0) {
    require(dp.kappa2 > 0, "dynamics limits need a positive ridge");
    DynamicsLimits out;
    const auto k0 = phi_kernels(spec, X, TimeGrid::uniform(1.0, 1), dp);
    out.Theta0 = initial_tangent_kernel(spec, k0);
    out.K_gp = k0.phi.at_lag(0);
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(out.Theta0));
    const double norm = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
    const double sigma2 = std::max(spec.readout_var, spec.weight_var);
    out.short_traj = msrdj_mean_predictor(spec, X, y, TimeGrid::uniform(0.1 / (dp.eta * norm), short_steps), dp);
    out.late_traj = msrdj_mean_predictor(spec, X, y, TimeGrid::uniform(late_factor * sigma2 / (dp.eta * dp.kappa2), late_steps), dp);
    out.short_time = limit_checks(out.short_traj, out.Theta0, dp.eta, out.K_gp, y, dp.kappa2);
    out.late_time = limit_checks(out.late_traj, out.Theta0, dp.eta, out.K_gp, y, dp.kappa2);
    return out;
}

}  // namespace kt

// kt: experiment front end. One subcommand per experiment; every run writes
// results.csv, summary.kv, manifest.kv and config.resolved.kv into --out.

#include "kerneltheory/config.hpp"
#include "kerneltheory/dataio.hpp"
#include "kerneltheory/experiments.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace fs = std::filesystem;
using namespace kt;

namespace {

struct RunContext {
    std::uint64_t seed = 0;
    unsigned threads = 1;
};

// ---- schemas -------------------------------------------------------------

struct NetDefaults {
    std::string kind = "fcn", activation = "erf", input_scaling = "fan_in";
    std::string depth = "2", input_dim = "8", patch_size = "0", channels = "512";
    std::string weight_var = "1", readout_var = "1", chi = "1", bias_var = "0";
};

struct DataDefaults {
    std::string kind = "gaussian_iid", train = "20", test = "20", target = "single_index_linear";
};

Schema net_schema(const NetDefaults& d = {}) {
    return {
        {"net.kind", d.kind, "fcn | cnn"},
        {"net.depth", d.depth, "number of layers including the readout"},
        {"net.activation", d.activation, "linear | erf | relu"},
        {"net.input_dim", d.input_dim, "input width"},
        {"net.patch_size", d.patch_size, "cnn patch width (0: whole input)"},
        {"net.channels", d.channels, "hidden width (empirical runs)"},
        {"net.weight_var", d.weight_var, "hidden weight variance"},
        {"net.readout_var", d.readout_var, "readout variance"},
        {"net.chi", d.chi, "mean-field output scale"},
        {"net.bias_var", d.bias_var, "bias variance"},
        {"net.input_scaling", d.input_scaling, "fan_in | unit"},
    };
}

Schema data_schema(const DataDefaults& d = {}) {
    return {
        {"data.source", "synthetic", "synthetic | csv"},
        {"data.kind", d.kind, "gaussian_iid | hypersphere_uniform"},
        {"data.train", d.train, "training points"},
        {"data.test", d.test, "test points"},
        {"data.path", "none", "csv file with a header line"},
        {"data.label_column", "label", "csv column holding the binary label"},
        {"data.positive_label", "auto", "label mapped to +1"},
        {"target.kind", d.target, "single_index_linear | patch_linear | cubic_single_index"},
    };
}

Schema spectrum_schema(std::string count = "65536") {
    return {
        {"spectrum.alpha", "1", "power-law exponent: lambda_k = lambda1 k^(-1-alpha)"},
        {"spectrum.lambda1", "1", "leading eigenvalue"},
        {"spectrum.count", std::move(count), "number of modes"},
        {"target.power", "0.5", "target coefficients y_k = lambda_k^power"},
    };
}

Schema sweep_schema(std::string lo = "16", std::string hi = "4096", std::string factor = "2") {
    return {
        {"sweep.P_min", std::move(lo), "smallest sample count"},
        {"sweep.P_max", std::move(hi), "largest sample count"},
        {"sweep.factor", std::move(factor), "geometric step of the sweep"},
    };
}

Schema train_schema() {
    return {
        {"train.temperature", "0.01", "Langevin temperature T (= ridge)"},
        {"train.steps", "20000", "steps per chain"},
        {"train.burn_in", "10000", "discarded steps"},
        {"train.thin", "10", "keep every n-th step"},
        {"train.seeds", "16", "independent chains"},
        {"train.step", "0", "step size (0: automatic)"},
        {"train.step_fraction", "0.05", "automatic step as a fraction of the stability limit"},
    };
}

Schema join(std::initializer_list<Schema> parts) {
    Schema out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

Schema prefixed(const std::string& prefix, const Schema& s) {
    Schema out;
    for (const auto& k : s) out.push_back({prefix + "." + k.name, k.fallback, k.help});
    return out;
}

// ---- config readers ------------------------------------------------------

NetworkSpec read_net(const Config& c) {
    NetworkSpec s;
    s.depth = static_cast<int>(c.integer("net.depth"));
    s.input_dim = static_cast<int>(c.integer("net.input_dim"));
    s.activation = parse_activation(c.text("net.activation"));
    s.channels = static_cast<int>(c.integer("net.channels"));
    s.weight_var = c.real("net.weight_var");
    s.readout_var = c.real("net.readout_var");
    s.output_scale = c.real("net.chi");
    s.bias_var = c.real("net.bias_var");
    const auto& sc = c.text("net.input_scaling");
    if (sc == "fan_in") s.input_scaling = InputScaling::fan_in;
    else if (sc == "unit") s.input_scaling = InputScaling::unit;
    else throw InvalidArgument("net.input_scaling must be fan_in or unit");
    const auto& kind = c.text("net.kind");
    if (kind == "fcn") {
        s.patch_size = s.input_dim;
        s.patch_count = 1;
    } else if (kind == "cnn") {
        const auto ps = static_cast<int>(c.integer("net.patch_size"));
        s.patch_size = ps > 0 ? ps : s.input_dim;
        require(s.patch_size > 0 && s.input_dim % s.patch_size == 0, "net.patch_size must divide net.input_dim");
        s.patch_count = s.input_dim / s.patch_size;
    } else {
        throw InvalidArgument("net.kind must be fcn or cnn");
    }
    s.validate();
    return s;
}

TeacherProblem read_problem(const Config& c, const NetworkSpec& spec, std::uint64_t seed) {
    const auto train = static_cast<int>(c.integer("data.train"));
    const auto test = static_cast<int>(c.integer("data.test"));
    require(train >= 1 && test >= 0, "data.train must be >= 1 and data.test >= 0");
    const auto& source = c.text("data.source");
    if (source == "synthetic") {
        return make_teacher_problem(spec, parse_synthetic_kind(c.text("data.kind")), parse_target_kind(c.text("target.kind")),
                                    train, std::max(test, 1), seed);
    }
    require(source == "csv", "data.source must be synthetic or csv");
    require(c.text("data.path") != "none", "data.path is required for csv data");
    const auto d = load_labelled_csv(c.text("data.path"), c.text("data.label_column"), c.text("data.positive_label"));
    require(d.X.cols() == spec.input_dim, "data file has " + std::to_string(d.X.cols()) +
                                              " feature columns but net.input_dim is " + std::to_string(spec.input_dim));
    require(d.X.rows() >= train + std::max(test, 1), "data file has fewer rows than data.train + data.test");
    TeacherProblem p;
    p.X_train = d.X.topRows(train);
    p.y_train = d.y.head(train);
    p.X_test = d.X.middleRows(train, std::max(test, 1));
    p.y_test = d.y.segment(train, std::max(test, 1));
    return p;
}

SpectralProblem read_spectrum(const Config& c) {
    return powerlaw_problem(c.real("spectrum.alpha"), c.count("spectrum.count"), c.real("spectrum.lambda1"),
                            c.real("target.power"));
}

std::vector<double> read_sweep(const Config& c) {
    return geometric_sweep(c.real("sweep.P_min"), c.real("sweep.P_max"), c.real("sweep.factor"));
}

TrainingConfig read_training(const Config& c, const RunContext& ctx) {
    TrainingConfig t;
    t.temperature = c.real("train.temperature");
    t.steps = c.count("train.steps");
    t.burn_in = c.count("train.burn_in");
    t.thin = c.count("train.thin");
    t.seeds = c.count("train.seeds");
    t.step = c.real("train.step");
    t.step_fraction = c.real("train.step_fraction");
    t.seed = derive_key({ctx.seed, 0x747261696eULL});
    t.threads = ctx.threads;
    t.validate();
    return t;
}

// ---- commands ------------------------------------------------------------

int cmd_kernel(const Config& c, const RunContext& ctx, RunArtifacts& out) {
    const auto spec = read_net(c);
    const auto prob = read_problem(c, spec, ctx.seed);
    const auto& type = c.text("kernel.type");
    Matrix K;
    if (type == "nngp") K = nngp_kernel(spec, prob.X_train);
    else if (type == "ntk") K = ntk_kernel_2layer(spec, prob.X_train);
    else if (type == "mc") K = empirical_kernel_mc(spec, prob.X_train, c.count("kernel.samples"), ctx.seed, ctx.threads);
    else throw InvalidArgument("kernel.type must be nngp, ntk or mc");
    out.results = ResultTable({"i", "j", "value"});
    for (Eigen::Index i = 0; i < K.rows(); ++i)
        for (Eigen::Index j = 0; j < K.cols(); ++j)
            out.results.add({std::to_string(i), std::to_string(j), format_real(K(i, j))});
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(K));
    out.summary.put("kernel.type", type);
    out.summary.put("points", static_cast<long long>(K.rows()));
    out.summary.put("trace", K.trace());
    out.summary.put("symmetry_error", (K - K.transpose()).cwiseAbs().maxCoeff());
    out.summary.put("min_eigenvalue", es.eigenvalues().minCoeff());
    out.summary.put("max_eigenvalue", es.eigenvalues().maxCoeff());
    out.summary.put("psd", is_psd(K));
    if (type == "mc") out.summary.put("max_abs_error_vs_nngp", (K - nngp_kernel(spec, prob.X_train)).cwiseAbs().maxCoeff());
    return 0;
}

int cmd_spectrum(const Config& c, const RunContext& ctx, RunArtifacts& out) {
    const auto& source = c.text("spectrum.source");
    out.results = ResultTable({"k", "lambda", "target_coefficient", "cumulative_fraction"});
    std::vector<double> lam, yk;
    double budget_error = 0;
    if (source == "powerlaw") {
        const auto sp = read_spectrum(c);
        lam = sp.lambda;
        yk = sp.y;
    } else if (source == "kernel") {
        const auto spec = read_net(c);
        const auto prob = read_problem(c, spec, ctx.seed);
        const auto measure = DataMeasure::uniform(prob.X_train);
        const Matrix K = c.text("kernel.type") == "ntk" ? ntk_kernel_2layer(spec, measure.points)
                                                        : nngp_kernel(spec, measure.points);
        const auto dec = eigendecompose(K, measure);
        const Vector coef = target_coefficients(prob.y_train, dec, measure.weights);
        lam.assign(dec.eigenvalues.data(), dec.eigenvalues.data() + dec.eigenvalues.size());
        yk.assign(coef.data(), coef.data() + coef.size());
        const double diag = measure.weights.dot(K.diagonal());
        budget_error = std::abs(dec.eigenvalues.sum() - diag) / std::max(std::abs(diag), 1e-300);
    } else {
        throw InvalidArgument("spectrum.source must be powerlaw or kernel");
    }
    const double total = detail::trace(lam);
    double run = 0;
    for (std::size_t k = 0; k < lam.size(); ++k) {
        run += lam[k];
        out.results.add({std::to_string(k + 1), format_real(lam[k]), format_real(yk[k]), format_real(run / total)});
    }
    out.summary.put("spectrum.source", source);
    out.summary.put("modes", lam.size());
    out.summary.put("trace", total);
    if (source == "kernel") out.summary.put("budget_relative_error", budget_error);
    return 0;
}

int cmd_gpr(const Config& c, const RunContext& ctx, RunArtifacts& out) {
    const auto spec = read_net(c);
    const auto prob = read_problem(c, spec, ctx.seed);
    const bool ntk = c.text("gpr.kernel") == "ntk";
    require(ntk || c.text("gpr.kernel") == "nngp", "gpr.kernel must be nngp or ntk");
    auto kern = [&](const Matrix& A, const Matrix& B) {
        return ntk ? ntk_cross_kernel_2layer(spec, A, B) : nngp_cross_kernel(spec, A, B);
    };
    const double k2 = c.real("gpr.kappa2");
    const SolverOptions opt{.allow_pseudo_inverse = c.flag("gpr.pseudo_inverse")};
    const Matrix K = kern(prob.X_train, prob.X_train);
    const auto test = gpr_predict(K, kern(prob.X_test, prob.X_train), kern(prob.X_test, prob.X_test).diagonal(),
                                  prob.y_train, k2, opt);
    const auto train = gpr_predict(K, K, K.diagonal(), prob.y_train, k2, opt);
    out.results = ResultTable({"split", "index", "y", "mean", "variance"});
    auto emit = [&](const char* split, const Vector& y, const GPRPosterior& g) {
        for (Eigen::Index i = 0; i < y.size(); ++i)
            out.results.add({split, std::to_string(i), format_real(y(i)), format_real(g.mean(i)), format_real(g.variance(i))});
    };
    emit("train", prob.y_train, train);
    emit("test", prob.y_test, test);
    out.summary.put("gpr.kernel", c.text("gpr.kernel"));
    out.summary.put("kappa2", k2);
    out.summary.put("train_mse", (train.mean - prob.y_train).squaredNorm() / static_cast<double>(prob.y_train.size()));
    out.summary.put("test_mse", (test.mean - prob.y_test).squaredNorm() / static_cast<double>(prob.y_test.size()));
    out.summary.put("test_learnability", learnability(test.mean, prob.y_test));
    out.summary.put("jitter", test.jitter);
    out.summary.put("pseudo_inverse", test.pseudo_inverse);
    return 0;
}

int cmd_curve(const Config& c, const RunContext& ctx, RunArtifacts& out) {
    const auto sp = read_spectrum(c);
    const auto Ps = read_sweep(c);
    const double k2 = c.real("curve.kappa2");
    const double eps = c.real("rg.epsilon");
    const auto& method = c.text("curve.method");
    require(method == "effective_ridge" || method == "ek" || method == "rg", "curve.method must be effective_ridge, ek or rg");
    std::vector<LearningCurvePrediction> preds(Ps.size());
    parallel_for(Ps.size(), ctx.threads, [&](std::size_t i) {
        if (method == "ek") preds[i] = ek_predict(sp.lambda, sp.y, Ps[i], k2);
        else if (method == "rg") preds[i] = rg_predict(sp.lambda, sp.y, Ps[i], k2, eps).closure;
        else preds[i] = effective_ridge_predict(sp.lambda, sp.y, Ps[i], k2);
    });
    out.results = ResultTable({"P", "kappa_eff2", "D", "bias", "variance", "loss"});
    std::vector<double> loss;
    for (std::size_t i = 0; i < Ps.size(); ++i) {
        const auto& p = preds[i];
        out.results.add_reals(std::vector<double>{Ps[i], p.kappa_eff2, p.D, p.bias, p.variance, p.loss});
        loss.push_back(p.loss);
    }
    out.summary.put("curve.method", method);
    out.summary.put("points", Ps.size());
    if (Ps.size() >= 2) out.summary.put("loss_loglog_slope", loglog_slope(Ps, loss));
    return 0;
}

int cmd_rg(const Config& c, const RunContext& ctx, RunArtifacts& out) {
    const auto sp = read_spectrum(c);
    const auto Ps = read_sweep(c);
    const auto rows = rg_vs_ridge(sp, Ps, c.real("rg.kappa2"), c.real("rg.epsilon"), ctx.threads);
    out.results = ResultTable({"P", "cutoff", "kappa_rg2", "loss_rg", "loss_rg_ek", "loss_effective_ridge", "deviation"});
    double worst = 0;
    for (const auto& r : rows) {
        out.results.add_reals(std::vector<double>{r.P, static_cast<double>(r.rg.flow.cutoff), r.rg.flow.kappa_rg2,
                                                  r.rg.closure.loss, r.rg.ek.loss, r.ridge.loss, r.deviation});
        worst = std::max(worst, std::abs(r.deviation));
    }
    out.summary.put("epsilon", c.real("rg.epsilon"));
    out.summary.put("max_abs_deviation", worst);
    return 0;
}

int cmd_scalinglaw(const Config& c, const RunContext& ctx, RunArtifacts& out) {
    const auto alphas = c.reals("scaling.alphas");
    const auto Ps = read_sweep(c);
    const auto modes = c.count("spectrum.count");
    const double ek_k2 = c.real("scaling.ek_kappa2");
    std::vector<ScalingFit> fits(2 * alphas.size());
    parallel_for(fits.size(), ctx.threads, [&](std::size_t i) {
        const auto regime = i % 2 == 0 ? ScalingRegime::ridgeless : ScalingRegime::ek;
        fits[i] = scaling_fit(alphas[i / 2], regime, Ps, modes, ek_k2);
    });
    out.results = ResultTable({"alpha", "regime", "slope", "expected", "deviation"});
    double worst_ridgeless = 0, worst_ek = 0;
    for (const auto& f : fits) {
        const bool ek = f.regime == ScalingRegime::ek;
        const double dev = f.slope - f.expected;
        out.results.add({format_real(f.alpha), ek ? "ek" : "ridgeless", format_real(f.slope), format_real(f.expected),
                         format_real(dev)});
        (ek ? worst_ek : worst_ridgeless) = std::max(ek ? worst_ek : worst_ridgeless, std::abs(dev));
    }
    out.summary.put("max_abs_deviation_ridgeless", worst_ridgeless);
    out.summary.put("max_abs_deviation_ek", worst_ek);
    return 0;
}

int cmd_featscale(const Config& c, const RunContext& ctx, RunArtifacts& out) {
    std::vector<double> lam, y;
    const auto& source = c.text("spectrum.source");
    const auto m = c.count("spectrum.count");
    require(m >= 1, "spectrum.count must be >= 1");
    if (source == "flat") {
        lam.assign(m, c.real("spectrum.lambda1") / static_cast<double>(m));
        y.assign(m, 0.0);
        y[0] = 1.0;
    } else if (source == "powerlaw") {
        const auto sp = read_spectrum(c);
        lam = sp.lambda;
        y = sp.y;
    } else {
        throw InvalidArgument("spectrum.source must be flat or powerlaw");
    }
    const auto Ns = c.reals("featscale.N");
    const auto Ps = read_sweep(c);
    const double k2 = c.real("featscale.kappa2");
    std::vector<KernelScalingSolution> sols(Ns.size() * Ps.size());
    parallel_for(sols.size(), ctx.threads, [&](std::size_t i) {
        sols[i] = kernel_scaling_solve(lam, y, Ps[i % Ps.size()], k2, Ns[i / Ps.size()]);
    });
    out.results = ResultTable({"N", "P", "Q", "C_MF", "kappa_eff2", "D", "learnability_first", "loss", "residual"});
    bool all = true;
    for (std::size_t i = 0; i < sols.size(); ++i) {
        const auto& s = sols[i];
        all = all && s.converged;
        out.results.add_reals(std::vector<double>{Ns[i / Ps.size()], Ps[i % Ps.size()], s.Q, s.C_MF, s.kappa_eff2, s.D,
                                                  s.prediction.learnability(0), s.prediction.loss, s.residual});
    }
    out.summary.put("all_converged", all);
    if (!all) throw NumericalError("kernel scaling did not converge at every sweep point");
    return 0;
}

int cmd_adapt(const Config& c, const RunContext& ctx, RunArtifacts& out) {
    const auto act = parse_activation(c.text("adapt.activation"));
    require(act == Activation::linear || act == Activation::erf, "adapt.activation must be linear or erf");
    AdaptationParams base;
    base.S = c.real("adapt.S");
    base.N_w = c.real("adapt.N_w");
    base.C = c.real("adapt.C");
    base.chi = c.real("adapt.chi");
    base.w_norm = c.real("adapt.w_norm");
    base.a_norm = c.real("adapt.a_norm");
    const double k2 = c.real("adapt.kappa2");
    const auto Ps = read_sweep(c);
    std::vector<AdaptationSolution> sols(Ps.size());
    std::vector<double> keff(Ps.size());
    parallel_for(Ps.size(), ctx.threads, [&](std::size_t i) {
        keff[i] = adaptation_kappa_eff(act, base.S, base.N_w, Ps[i], k2);
        sols[i] = adaptation_at(act, base, Ps[i], k2);
    });
    out.results = ResultTable({"P", "kappa_eff2", "c_perp", "c_star", "lambda_star", "lambda_perp", "amplification",
                               "learnability", "norm_concentration_ok"});
    for (std::size_t i = 0; i < Ps.size(); ++i) {
        const auto& s = sols[i];
        out.results.add({format_real(Ps[i]), format_real(keff[i]), format_real(s.c_perp), format_real(s.c_star),
                         format_real(s.lambda_star), format_real(s.lambda_perp), format_real(s.amplification),
                         format_real(s.learnability), s.norm_concentration_ok ? "true" : "false"});
    }
    out.summary.put("activation", c.text("adapt.activation"));
    out.summary.put("P_half", adaptation_sample_complexity(act, base, k2));
    out.summary.put("max_amplification", std::max_element(sols.begin(), sols.end(), [](const auto& a, const auto& b) {
                                             return a.amplification < b.amplification;
                                         })->amplification);
    return 0;
}

int cmd_dynamics(const Config& c, const RunContext& ctx, RunArtifacts& out) {
    const auto spec = read_net(c);
    const auto prob = read_problem(c, spec, ctx.seed);
    const DynamicsParams dp{c.real("dynamics.eta"), c.real("dynamics.kappa2")};
    const auto lim = dynamics_limits(spec, prob.X_train, prob.y_train, dp, c.count("dynamics.short_steps"),
                                     c.count("dynamics.late_steps"), c.real("dynamics.late_factor"));
    out.results = ResultTable({"phase", "t", "point", "f"});
    auto emit = [&](const char* phase, const MeanPredictorTrajectory& tr) {
        for (std::size_t j = 0; j < tr.grid.size(); ++j)
            for (Eigen::Index i = 0; i < tr.f.cols(); ++i)
                out.results.add({phase, format_real(tr.grid.t(j)), std::to_string(i),
                                 format_real(tr.f(static_cast<Eigen::Index>(j), i))});
    };
    emit("short", lim.short_traj);
    emit("late", lim.late_traj);
    out.summary.put("short_time_end", lim.short_time.short_time_end);
    out.summary.put("short_time_deviation", lim.short_time.short_time_deviation);
    out.summary.put("late_time", lim.late_time.late_time);
    out.summary.put("late_time_deviation", lim.late_time.late_time_deviation);
    out.summary.put("late_deviation_monotone", lim.late_time.late_deviation_monotone);
    return 0;
}

int cmd_train(const Config& c, const RunContext& ctx, RunArtifacts& out) {
    const auto spec = read_net(c);
    const auto prob = read_problem(c, spec, ctx.seed);
    const auto cfg = read_training(c, ctx);
    const auto res = gpr_vs_train(spec, prob, cfg);
    out.results = ResultTable({"index", "y", "ensemble_mean", "ensemble_variance", "gpr_mean", "gpr_variance"});
    for (Eigen::Index i = 0; i < prob.y_test.size(); ++i)
        out.results.add_reals(std::vector<double>{static_cast<double>(i), prob.y_test(i), res.ensemble.mean(i),
                                                  res.ensemble.variance(i), res.gpr.mean(i), res.gpr.variance(i)});
    out.summary.put("step", res.ensemble.step);
    out.summary.put("samples_per_seed", res.ensemble.samples_per_seed);
    out.summary.put("relative_rmse_vs_gpr", res.relative_rmse);
    out.summary.put("test_learnability", learnability(res.ensemble.mean, prob.y_test));
    out.summary.put("split_half_z", res.ensemble.split_half_z);
    out.summary.put("equilibrated", res.ensemble.equilibrated);
    return 0;
}

// ---- compare -------------------------------------------------------------

struct CheckLine {
    std::string metric;
    double value;
    double tolerance;
    std::string relation;  // "<", ">", "within"
    bool pass;
};

struct Check {
    std::string name;
    std::string help;
    Schema schema;
    std::function<std::vector<CheckLine>(const Config&, const RunContext&)> run;
};

CheckLine below(std::string metric, double v, double tol) { return {std::move(metric), v, tol, "<", std::abs(v) < tol}; }

std::vector<Check> all_checks() {
    NetDefaults lin;
    lin.activation = "linear";
    lin.input_dim = "10";
    lin.input_scaling = "unit";
    DataDefaults lin_data;
    lin_data.train = "30";
    NetDefaults dyn = lin;
    dyn.input_dim = "32";
    dyn.chi = "10000";
    DataDefaults dyn_data;
    dyn_data.train = "8";
    NetDefaults single;
    single.channels = "1";
    return {
        {"nngp-vs-mc", "Monte Carlo second moment of network outputs vs the NNGP kernel",
         join({net_schema(single), data_schema(),
               {{"samples", "1000000", "weight draws"}, {"tolerance", "5e-3", "max abs kernel error"}}}),
         [](const Config& c, const RunContext& ctx) {
             const auto spec = read_net(c);
             const auto prob = read_problem(c, spec, ctx.seed);
             const auto r = nngp_vs_mc(spec, prob.X_train, c.count("samples"), ctx.seed, ctx.threads);
             return std::vector<CheckLine>{below("max_abs_kernel_error", r.max_abs_error, c.real("tolerance"))};
         }},
        {"gpr-vs-train", "Langevin ensemble mean vs GPR with the NNGP kernel",
         join({net_schema(lin), data_schema(lin_data), train_schema(),
               {{"tolerance", "0.1", "relative RMSE on the test set"}}}),
         [](const Config& c, const RunContext& ctx) {
             const auto spec = read_net(c);
             const auto r = gpr_vs_train(spec, read_problem(c, spec, ctx.seed), read_training(c, ctx));
             return std::vector<CheckLine>{below("relative_rmse", r.relative_rmse, c.real("tolerance"))};
         }},
        {"curve-vs-mc", "effective-ridge learning curve vs dataset-averaged GPR on Gaussian features",
         join({spectrum_schema("2048"), sweep_schema("16", "256"),
               {{"kappa2", "1e-8", "ridge"},
                {"draws", "500", "dataset draws per P"},
                {"loss_tolerance", "0.10", "relative loss deviation"},
                {"variance_tolerance", "0.15", "relative type-(ii) variance deviation"}}}),
         [](const Config& c, const RunContext& ctx) {
             const auto Ps = read_sweep(c);
             const auto rows = curve_vs_mc(read_spectrum(c), Ps, c.real("kappa2"), c.count("draws"), ctx.seed, ctx.threads);
             std::vector<CheckLine> lines;
             for (const auto& r : rows) {
                 const auto P = std::to_string(static_cast<long long>(r.P));
                 lines.push_back(below("loss_deviation_P" + P, r.loss_deviation, c.real("loss_tolerance")));
                 lines.push_back(below("variance_deviation_P" + P, r.variance_deviation, c.real("variance_tolerance")));
             }
             return lines;
         }},
        {"rg-vs-ridge", "RG-renormalised prediction vs the effective-ridge prediction",
         join({spectrum_schema("1000000"), sweep_schema("16", "256"),
               {{"kappa2", "1e-8", "ridge"}, {"epsilon", "0.01", "RG stopping threshold"},
                {"tolerance", "0.15", "relative loss deviation"}}}),
         [](const Config& c, const RunContext& ctx) {
             const auto rows = rg_vs_ridge(read_spectrum(c), read_sweep(c), c.real("kappa2"), c.real("epsilon"), ctx.threads);
             std::vector<CheckLine> lines;
             for (const auto& r : rows)
                 lines.push_back(below("deviation_P" + std::to_string(static_cast<long long>(r.P)), r.deviation,
                                       c.real("tolerance")));
             return lines;
         }},
        {"scaling-law", "log-log slopes of predicted loss against the data exponents",
         join({sweep_schema(), {{"alphas", "0.5,1,2", "power-law exponents"},
                                {"spectrum.count", "1000000", "modes"},
                                {"ek_kappa2", "1", "fixed ridge of the EK regime"},
                                {"ridgeless_tolerance", "0.1", "slope tolerance"},
                                {"ek_tolerance", "0.05", "slope tolerance"}}}),
         [](const Config& c, const RunContext& ctx) {
             const auto alphas = c.reals("alphas");
             const auto Ps = read_sweep(c);
             std::vector<ScalingFit> fits(2 * alphas.size());
             parallel_for(fits.size(), ctx.threads, [&](std::size_t i) {
                 fits[i] = scaling_fit(alphas[i / 2], i % 2 ? ScalingRegime::ek : ScalingRegime::ridgeless, Ps,
                                       c.count("spectrum.count"), c.real("ek_kappa2"));
             });
             std::vector<CheckLine> lines;
             for (const auto& f : fits) {
                 const bool ek = f.regime == ScalingRegime::ek;
                 lines.push_back(below(std::string(ek ? "ek" : "ridgeless") + "_slope_error_alpha" + format_real(f.alpha),
                                       f.slope - f.expected, c.real(ek ? "ek_tolerance" : "ridgeless_tolerance")));
             }
             return lines;
         }},
        {"dynamics-limits", "mean-predictor dynamics vs NTK flow at short times and GPR at late times",
         join({net_schema(dyn), data_schema(dyn_data),
               {{"eta", "1", "learning rate"}, {"kappa2", "0.01", "ridge"},
                {"short_steps", "200", "steps on the short grid"}, {"late_steps", "2000", "steps on the late grid"},
                {"late_factor", "50", "late time in units of sigma^2 / (eta kappa2)"},
                {"tolerance", "1e-3", "relative deviation"}}}),
         [](const Config& c, const RunContext& ctx) {
             const auto spec = read_net(c);
             const auto prob = read_problem(c, spec, ctx.seed);
             const auto lim = dynamics_limits(spec, prob.X_train, prob.y_train, {c.real("eta"), c.real("kappa2")},
                                              c.count("short_steps"), c.count("late_steps"), c.real("late_factor"));
             return std::vector<CheckLine>{
                 below("short_time_vs_ntk", lim.short_time.short_time_deviation, c.real("tolerance")),
                 below("late_time_vs_gpr", lim.late_time.late_time_deviation, c.real("tolerance"))};
         }},
        {"adapt-erf-vs-linear", "erf and linear amplification factors at matched parameters",
         {{"S", "50", "patch size"}, {"N_w", "1,5,10", "patch counts"}, {"C", "1000", "channels"},
          {"chi", "100", "mean-field scale"}, {"P", "100", "samples"}, {"kappa2", "0.01", "ridge"},
          {"factor", "2", "allowed ratio between the amplifications"}},
         [](const Config& c, const RunContext&) {
             std::vector<CheckLine> lines;
             for (double nw : c.reals("N_w")) {
                 AdaptationParams p;
                 p.S = c.real("S");
                 p.N_w = nw;
                 p.C = c.real("C");
                 p.chi = c.real("chi");
                 p.P = c.real("P");
                 p.kappa_eff2 = adaptation_kappa_eff(Activation::linear, p.S, nw, p.P, c.real("kappa2"));
                 const auto lin = adaptation_solve_linear(p);
                 p.kappa_eff2 = adaptation_kappa_eff(Activation::erf, p.S, nw, p.P, c.real("kappa2"));
                 const auto erf = adaptation_solve_erf(p);
                 const double ratio = erf.amplification / lin.amplification;
                 const double f = c.real("factor");
                 const auto tag = "_Nw" + format_real(nw);
                 lines.push_back({"erf_over_linear" + tag, ratio, f, "within", ratio <= f && ratio >= 1 / f});
                 lines.push_back({"linear_amplification" + tag, lin.amplification, 1, ">", lin.amplification > 1});
                 lines.push_back({"erf_amplification" + tag, erf.amplification, 1, ">", erf.amplification > 1});
             }
             return lines;
         }},
        {"kernel-scaling-vs-train", "kernel-scaling learnability vs Langevin ensembles of a linear FCN",
         join({sweep_schema("10", "160"),
               {{"d", "20", "input width"}, {"N", "200", "hidden width"}, {"kappa2", "1", "ridge = temperature"},
                {"datasets", "20", "training sets (one chain each) per P"}, {"test", "1000", "test points"},
                {"train.steps", "8000", "steps per chain"}, {"train.burn_in", "4000", "discarded steps"},
                {"train.thin", "20", "keep every n-th step"},
                {"tolerance", "0.1", "max learnability deviation"}}}),
         [](const Config& c, const RunContext& ctx) {
             TrainingConfig t;
             t.steps = c.count("train.steps");
             t.burn_in = c.count("train.burn_in");
             t.thin = c.count("train.thin");
             const auto rows = kernel_scaling_vs_train(static_cast<int>(c.integer("d")), static_cast<int>(c.integer("N")),
                                                       c.real("kappa2"), read_sweep(c), c.count("datasets"),
                                                       static_cast<int>(c.integer("test")), t, ctx.seed, ctx.threads);
             double worst = 0;
             for (const auto& r : rows) worst = std::max(worst, r.deviation);
             return std::vector<CheckLine>{below("max_learnability_deviation", worst, c.real("tolerance"))};
         }},
        {"adapt-vs-train", "adaptation sample complexity and learnability vs Langevin ensembles of a linear CNN",
         {{"alphas", "1,2,4", "size multipliers"}, {"N_w", "4", "patch count at alpha = 1"},
          {"S", "16", "patch size at alpha = 1"}, {"C", "64", "channels at alpha = 1"}, {"chi", "100", "mean-field scale"},
          {"kappa2", "0.01", "ridge (temperature kappa2 / chi)"}, {"P_factors", "0.5,1,2", "P in units of P_half"},
          {"datasets", "4", "training sets (one chain each) per P"}, {"test", "500", "test points"},
          {"train.steps", "100000", "steps per chain"}, {"train.burn_in", "50000", "discarded steps"},
          {"train.thin", "50", "keep every n-th step"}, {"slope", "0.75", "expected sample-complexity slope"},
          {"slope_tolerance", "0.15", "slope tolerance"}, {"tolerance", "0.15", "max learnability deviation"}},
         [](const Config& c, const RunContext& ctx) {
             TrainingConfig t;
             t.steps = c.count("train.steps");
             t.burn_in = c.count("train.burn_in");
             t.thin = c.count("train.thin");
             std::vector<double> dims, p_half;
             double worst = 0;
             for (double a : c.reals("alphas")) {
                 AdaptationParams p;
                 p.N_w = std::round(a * c.real("N_w"));
                 p.S = std::round(a * c.real("S"));
                 p.C = std::round(a * c.real("C"));
                 p.chi = c.real("chi");
                 const auto r = adaptation_vs_train(p, c.real("kappa2"), c.reals("P_factors"), c.count("datasets"),
                                                    static_cast<int>(c.integer("test")), t, derive_key({ctx.seed, static_cast<std::uint64_t>(p.S)}),
                                                    ctx.threads);
                 dims.push_back(r.d_in);
                 p_half.push_back(r.P_half);
                 for (const auto& row : r.rows) worst = std::max(worst, row.deviation);
             }
             const double slope = loglog_slope(dims, p_half);
             return std::vector<CheckLine>{
                 below("sample_complexity_slope_error", slope - c.real("slope"), c.real("slope_tolerance")),
                 below("max_learnability_deviation", worst, c.real("tolerance"))};
         }},
    };
}

// ---- driver --------------------------------------------------------------

struct CommandDef {
    std::string name;
    std::string help;
    Schema schema;
    std::function<int(const Config&, const RunContext&, RunArtifacts&)> run;
};

std::vector<CommandDef> all_commands() {
    NetDefaults two_layer_linear;
    two_layer_linear.activation = "linear";
    two_layer_linear.input_dim = "10";
    two_layer_linear.input_scaling = "unit";
    DataDefaults train_data;
    train_data.train = "30";
    NetDefaults dyn = two_layer_linear;
    dyn.input_dim = "32";
    dyn.chi = "10000";
    DataDefaults dyn_data;
    dyn_data.train = "8";
    return {
        {"kernel", "NNGP, NTK or Monte Carlo kernel on the training inputs",
         join({net_schema(), data_schema(), {{"kernel.type", "nngp", "nngp | ntk | mc"}, {"kernel.samples", "100000", "mc weight draws"}}}),
         cmd_kernel},
        {"spectrum", "power-law spectrum or the eigendecomposition of a kernel on data",
         join({net_schema(), data_schema(), spectrum_schema("1024"),
               {{"spectrum.source", "powerlaw", "powerlaw | kernel"}, {"kernel.type", "nngp", "nngp | ntk"}}}),
         cmd_spectrum},
        {"gpr", "GPR posterior on train and test inputs",
         join({net_schema(), data_schema(),
               {{"gpr.kappa2", "0.01", "ridge"}, {"gpr.kernel", "nngp", "nngp | ntk"}, {"gpr.pseudo_inverse", "false", "fall back to the pseudo-inverse"}}}),
         cmd_gpr},
        {"curve", "predicted learning curve over a P sweep",
         join({spectrum_schema(), sweep_schema(),
               {{"curve.kappa2", "0", "ridge"}, {"curve.method", "effective_ridge", "effective_ridge | ek | rg"},
                {"rg.epsilon", "0.01", "RG stopping threshold"}}}),
         cmd_curve},
        {"rg", "RG flow and its prediction next to the effective ridge",
         join({spectrum_schema("1000000"), sweep_schema("16", "256"),
               {{"rg.kappa2", "1e-8", "ridge"}, {"rg.epsilon", "0.01", "stopping threshold"}}}),
         cmd_rg},
        {"scalinglaw", "fitted loss exponents in the ridgeless and EK regimes",
         join({sweep_schema(), {{"scaling.alphas", "0.5,1,2", "exponents"}, {"spectrum.count", "1000000", "modes"},
                                {"scaling.ek_kappa2", "1", "fixed ridge of the EK regime"}}}),
         cmd_scalinglaw},
        {"featscale", "kernel scaling factor Q over P and N sweeps",
         join({spectrum_schema("20"), sweep_schema("10", "160"),
               {{"spectrum.source", "flat", "flat | powerlaw"}, {"featscale.N", "200", "network widths"},
                {"featscale.kappa2", "0.01", "ridge"}}}),
         cmd_featscale},
        {"adapt", "kernel adaptation order parameters over a P sweep",
         join({sweep_schema("16", "16384"),
               {{"adapt.activation", "linear", "linear | erf"}, {"adapt.S", "16", "patch size"}, {"adapt.N_w", "4", "patches"},
                {"adapt.C", "64", "channels"}, {"adapt.chi", "100", "mean-field scale"}, {"adapt.kappa2", "0.01", "ridge"},
                {"adapt.w_norm", "1", "teacher direction norm"}, {"adapt.a_norm", "1", "teacher readout norm"}}}),
         cmd_adapt},
        {"dynamics", "mean-predictor trajectory of Langevin training",
         join({net_schema(dyn), data_schema(dyn_data),
               {{"dynamics.eta", "1", "learning rate"}, {"dynamics.kappa2", "0.01", "ridge"},
                {"dynamics.short_steps", "200", "short grid steps"}, {"dynamics.late_steps", "2000", "late grid steps"},
                {"dynamics.late_factor", "50", "late time in units of sigma^2 / (eta kappa2)"}}}),
         cmd_dynamics},
        {"train", "Langevin ensemble next to GPR",
         join({net_schema(two_layer_linear), data_schema(train_data), train_schema()}), cmd_train},
    };
}

int run_compare(const std::vector<std::string>& names, const Config& raw, const RunContext& ctx, RunArtifacts& out) {
    const auto checks = all_checks();
    std::vector<const Check*> chosen;
    Schema schema;
    for (const auto& n : names) {
        const auto it = std::find_if(checks.begin(), checks.end(), [&](const Check& c) { return c.name == n; });
        if (it == checks.end()) throw InvalidArgument("unknown check '" + n + "'");
        chosen.push_back(&*it);
        const auto s = prefixed(n, it->schema);
        schema.insert(schema.end(), s.begin(), s.end());
    }
    if (chosen.empty()) throw InvalidArgument("compare needs at least one check name");
    Config cfg = raw;
    cfg.bind(schema);
    out.resolved = cfg;
    out.results = ResultTable({"check", "metric", "value", "relation", "tolerance", "pass"});
    std::size_t passed = 0, total = 0;
    for (const auto* ch : chosen) {
        for (const auto& l : ch->run(cfg.scoped(ch->name), ctx)) {
            out.results.add({ch->name, l.metric, format_real(l.value), l.relation, format_real(l.tolerance),
                             l.pass ? "PASS" : "FAIL"});
            ++total;
            passed += l.pass;
            std::cout << (l.pass ? "PASS " : "FAIL ") << ch->name << " " << l.metric << " = " << format_real(l.value)
                      << " (" << l.relation << " " << format_real(l.tolerance) << ")\n";
        }
    }
    out.summary.put("checks", total);
    out.summary.put("passed", passed);
    out.summary.put("failed", total - passed);
    out.summary.put("all_pass", passed == total);
    return passed == total ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kernel theory experiments"};
    app.require_subcommand(1);
    std::string config_path, out_dir = "kt-out";
    std::uint64_t seed = 0;
    unsigned threads = std::max(1u, std::thread::hardware_concurrency());
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "flat key = value configuration file");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "global seed");
    app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    app.add_option("--override", overrides, "key=value, repeatable")->allow_extra_args(false);

    const auto commands = all_commands();
    std::vector<std::string> check_names;
    for (const auto& c : commands) app.add_subcommand(c.name, c.help)->fallthrough();
    auto* compare = app.add_subcommand("compare", "theory-vs-oracle checks with pass/fail per tolerance")->fallthrough();
    std::string available;
    for (const auto& ch : all_checks()) available += " " + ch.name;
    compare->add_option("checks", check_names, "checks to run:" + available)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        Config cfg = config_path.empty() ? Config{} : Config::load(config_path);
        for (const auto& kv : overrides) cfg.apply_override(kv);
        const RunContext ctx{seed, threads};
        RunArtifacts art;
        art.seed = seed;
        int rc = 0;
        if (compare->parsed()) {
            art.command = "compare";
            rc = run_compare(check_names, cfg, ctx, art);
        } else {
            const auto it = std::find_if(commands.begin(), commands.end(),
                                         [&](const CommandDef& c) { return app.got_subcommand(c.name); });
            art.command = it->name;
            cfg.bind(it->schema);
            art.resolved = cfg;
            rc = it->run(cfg, ctx, art);
        }
        art.write(out_dir);
        std::cout << "wrote " << out_dir << "\n";
        return rc;
    } catch (const InvalidArgument& e) {
        std::cerr << "kt: configuration error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "kt: numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "kt: error: " << e.what() << "\n";
        return 3;
    }
}

#pragma once

#include "kerneltheory/common.hpp"
#include "kerneltheory/gpr.hpp"
#include "kerneltheory/kernels.hpp"
#include "kerneltheory/rng.hpp"

namespace kt {

struct TimeGrid {
    double h = 0.0;
    std::size_t steps = 0;  // number of intervals; points t_0..t_steps

    static TimeGrid uniform(double t_end, std::size_t steps) {
        require(steps >= 1, "time grid needs at least one step");
        require(t_end > 0 && std::isfinite(t_end), "time grid end must be positive");
        return TimeGrid{t_end / static_cast<double>(steps), steps};
    }

    double t(std::size_t j) const { return h * static_cast<double>(j); }
    std::size_t size() const { return steps + 1; }
    double end() const { return t(steps); }
};

// Two-time kernel that depends only on |t - t'|, stored per lag on a grid.
struct TwoTimeKernel {
    std::vector<Matrix> by_lag;

    const Matrix& operator()(std::size_t j, std::size_t l) const { return by_lag[j > l ? j - l : l - j]; }
    const Matrix& at_lag(std::size_t m) const { return by_lag[m]; }
};

struct DynamicsParams {
    double eta = 1.0;
    double kappa2 = 0.0;

    double rate_w(const NetworkSpec& s) const { return eta * kappa2 / (s.weight_var * s.output_scale); }
    double rate_a(const NetworkSpec& s) const { return eta * kappa2 / s.readout_var; }
};

struct PhiKernels {
    TwoTimeKernel phi;  // sum_i E[sigma(h_i(t)) sigma(h_i(t'))]
    TwoTimeKernel psi;  // sum_i E[sigma'(h_i(t)) sigma'(h_i(t'))] x_i.x'_i / fan
};

namespace detail {

inline void check_two_layer(const NetworkSpec& spec) {
    spec.validate();
    require(spec.depth == 2, "dynamics: two-layer networks only");
}

}  // namespace detail

// Closed-form two-time kernels for input weights following the stationary OU process
// with correlation exp(-rate_w |t - t'|).
inline PhiKernels phi_kernels(const NetworkSpec& spec, const Matrix& X, const TimeGrid& grid, const DynamicsParams& dp) {
    detail::check_two_layer(spec);
    const auto overlaps = patch_overlaps(spec, X, X);
    const auto P = X.rows();
    const double rw = dp.rate_w(spec);
    const double sw = spec.weight_var;
    PhiKernels out;
    out.phi.by_lag.resize(grid.size());
    out.psi.by_lag.resize(grid.size());
    for (std::size_t m = 0; m < grid.size(); ++m) {
        const double rho = std::exp(-rw * grid.t(m));
        Matrix phi = Matrix::Zero(P, P), psi = Matrix::Zero(P, P);
        for (const auto& G : overlaps) {
            for (Eigen::Index a = 0; a < P; ++a) {
                for (Eigen::Index b = 0; b < P; ++b) {
                    const double kxx = sw * G(a, a), kyy = sw * G(b, b), kxy = sw * rho * G(a, b);
                    phi(a, b) += gaussian_activation_moment(spec.activation, kxx, kyy, kxy);
                    psi(a, b) += gaussian_derivative_moment(spec.activation, kxx, kyy, kxy) * G(a, b);
                }
            }
        }
        out.phi.by_lag[m] = std::move(phi);
        out.psi.by_lag[m] = std::move(psi);
    }
    return out;
}

struct PhiEstimate {
    Matrix phi;
    Matrix psi;
    Matrix phi_stderr;
};

// Monte Carlo estimate of the two kernels at a single lag by sampling OU pairs.
inline PhiEstimate phi_kernels_mc(const NetworkSpec& spec, const Matrix& X, double lag, const DynamicsParams& dp,
                                  std::size_t samples, std::uint64_t seed) {
    detail::check_two_layer(spec);
    require(samples >= 2, "phi_kernels_mc: need at least two samples");
    const auto P = X.rows();
    const int S = spec.patch_size;
    const double rho = std::exp(-dp.rate_w(spec) * lag);
    const double sd = std::sqrt(spec.weight_var / spec.fan());
    Matrix s1 = Matrix::Zero(P, P), s2 = Matrix::Zero(P, P), sp = Matrix::Zero(P, P);
    CounterRng rng({seed, 0x6f75, 0});
    for (std::size_t n = 0; n < samples; ++n) {
        const Vector w = rng.normal_vector(S, sd);
        const Vector w2 = rho * w + std::sqrt(std::max(0.0, 1 - rho * rho)) * rng.normal_vector(S, sd);
        Matrix term = Matrix::Zero(P, P), dterm = Matrix::Zero(P, P);
        for (int i = 0; i < spec.patch_count; ++i) {
            const auto xi = X.middleCols(static_cast<Eigen::Index>(i) * S, S);
            const Vector h1 = xi * w, h2 = xi * w2;
            Vector a1(P), a2(P), d1(P), d2(P);
            for (Eigen::Index a = 0; a < P; ++a) {
                a1(a) = activate(spec.activation, h1(a));
                a2(a) = activate(spec.activation, h2(a));
                d1(a) = activate_derivative(spec.activation, h1(a));
                d2(a) = activate_derivative(spec.activation, h2(a));
            }
            term += a1 * a2.transpose();
            dterm += (d1 * d2.transpose()).cwiseProduct(xi * xi.transpose()) / spec.fan();
        }
        s1 += term;
        s2 += term.cwiseAbs2();
        sp += dterm;
    }
    const double n = static_cast<double>(samples);
    PhiEstimate out;
    out.phi = s1 / n;
    out.psi = sp / n;
    out.phi_stderr = ((s2 / n - out.phi.cwiseAbs2()).cwiseMax(0.0) / (n - 1)).cwiseSqrt();
    return out;
}

// Memory kernel G(lag) = eta [e^{-r_a lag} Phi + (sigma_a^2 / 2 chi) e^{-(r_a + r_w) lag} Psi].
inline TwoTimeKernel memory_kernel(const NetworkSpec& spec, const PhiKernels& k, const TimeGrid& grid,
                                   const DynamicsParams& dp) {
    require(k.phi.by_lag.size() == grid.size() && k.psi.by_lag.size() == grid.size(),
            "memory_kernel: kernels and grid disagree");
    const double ra = dp.rate_a(spec), rw = dp.rate_w(spec);
    const double c = spec.readout_var / (2.0 * spec.output_scale);
    TwoTimeKernel G;
    G.by_lag.resize(grid.size());
    for (std::size_t m = 0; m < grid.size(); ++m) {
        const double t = grid.t(m);
        G.by_lag[m] = dp.eta * (std::exp(-ra * t) * k.phi.by_lag[m] + c * std::exp(-(ra + rw) * t) * k.psi.by_lag[m]);
    }
    return G;
}

// Kernel governing the initial slope, Theta_0 = Phi(0,0) + (sigma_a^2 / 2 chi) Psi(0,0).
inline Matrix initial_tangent_kernel(const NetworkSpec& spec, const PhiKernels& k) {
    return k.phi.by_lag.front() + spec.readout_var / (2.0 * spec.output_scale) * k.psi.by_lag.front();
}

// f(t) = -int_0^t G(t - t') (f(t') - y) dt', f(0) = 0, trapezoid product integration
// with the current slice solved implicitly. Row j of the result is f(t_j).
inline Matrix volterra_march(const TwoTimeKernel& G, const Vector& y, const TimeGrid& grid) {
    const auto P = y.size();
    require(G.by_lag.size() >= grid.size(), "volterra_march: kernel shorter than grid");
    for (const auto& g : G.by_lag) require(g.rows() == P && g.cols() == P, "volterra_march: kernel size mismatch");
    Matrix F = Matrix::Zero(static_cast<Eigen::Index>(grid.size()), P);
    if (P == 0) return F;
    const double h = grid.h;
    const Matrix A = Matrix::Identity(P, P) + 0.5 * h * G.at_lag(0);
    const Eigen::PartialPivLU<Matrix> lu(A);
    std::vector<Vector> e(grid.size());
    e[0] = -y;
    for (std::size_t n = 1; n < grid.size(); ++n) {
        Vector rhs = 0.5 * h * (G.at_lag(0) * y) - 0.5 * h * (G.at_lag(n) * e[0]);
        for (std::size_t j = 1; j < n; ++j) rhs.noalias() -= h * (G.at_lag(n - j) * e[j]);
        const Vector f = lu.solve(rhs);
        if (!f.allFinite()) throw NumericalError("volterra_march: non-finite solution at step " + std::to_string(n));
        F.row(static_cast<Eigen::Index>(n)) = f.transpose();
        e[n] = f - y;
    }
    return F;
}

struct MeanPredictorTrajectory {
    TimeGrid grid;
    Matrix f;  // rows: time points, cols: train points
    double step_change = 0.0;  // max relative change when h is halved (0 if not checked)
};

// Mean predictor of the Langevin-trained two-layer network on its train set.
inline MeanPredictorTrajectory msrdj_mean_predictor(const NetworkSpec& spec, const Matrix& X, const Vector& y,
                                                    const TimeGrid& grid, const DynamicsParams& dp,
                                                    double halving_tol = -1.0) {
    detail::check_two_layer(spec);
    require(X.rows() == y.size(), "msrdj_mean_predictor: data and targets differ in size");
    require(dp.eta > 0 && dp.kappa2 >= 0, "msrdj_mean_predictor: eta must be positive and ridge non-negative");
    MeanPredictorTrajectory out;
    out.grid = grid;
    out.f = volterra_march(memory_kernel(spec, phi_kernels(spec, X, grid, dp), grid, dp), y, grid);
    if (halving_tol > 0) {
        const TimeGrid fine{grid.h / 2, grid.steps * 2};
        const Matrix Ff = volterra_march(memory_kernel(spec, phi_kernels(spec, X, fine, dp), fine, dp), y, fine);
        const double scale = std::max(out.f.cwiseAbs().maxCoeff(), 1e-300);
        double change = 0;
        for (std::size_t j = 0; j < grid.size(); ++j)
            change = std::max(change, (out.f.row(static_cast<Eigen::Index>(j)) -
                                       Ff.row(static_cast<Eigen::Index>(2 * j)))
                                          .cwiseAbs()
                                          .maxCoeff());
        out.step_change = change / scale;
        if (out.step_change > halving_tol)
            throw NumericalError("msrdj_mean_predictor: solution changed by " + std::to_string(out.step_change) +
                                 " when the step was halved; use a smaller step");
    }
    return out;
}

// Default grid: 400 steps to 10 max(sigma_a^2, sigma_w^2 chi) / (eta kappa2).
inline TimeGrid default_dynamics_grid(const NetworkSpec& spec, const DynamicsParams& dp, std::size_t steps = 400) {
    require(dp.kappa2 > 0, "default grid needs a positive ridge");
    const double scale = std::max(spec.readout_var, spec.weight_var * spec.output_scale);
    return TimeGrid::uniform(10.0 * scale / (dp.eta * dp.kappa2), steps);
}

struct NtkFlow {
    Matrix train;  // rows: times
    Matrix test;
};

// f_t = y - exp(-gamma Theta_D t)(y - f0) on the train set; the test trajectory follows
// f*_t = f*_0 + theta_* Theta_D^{-1} (1 - exp(-gamma Theta_D t)) (y - f0).
inline NtkFlow ntk_flow(const Matrix& Theta_D, const Vector& y, const Vector& f0, double gamma,
                        std::span<const double> times, const Matrix* theta_star = nullptr,
                        const Vector* f0_test = nullptr) {
    const auto P = Theta_D.rows();
    require(Theta_D.cols() == P && y.size() == P && f0.size() == P, "ntk_flow: dimension mismatch");
    require(gamma >= 0, "ntk_flow: gamma must be non-negative");
    require(is_psd(Theta_D), "ntk_flow: kernel must be PSD");
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(Theta_D));
    const Matrix V = es.eigenvectors();
    const Vector lam = es.eigenvalues().cwiseMax(0.0);
    const Vector z = V.transpose() * (y - f0);
    NtkFlow out;
    out.train.resize(static_cast<Eigen::Index>(times.size()), P);
    const bool with_test = theta_star && f0_test;
    if (with_test) {
        require(theta_star->cols() == P && f0_test->size() == theta_star->rows(), "ntk_flow: test size mismatch");
        out.test.resize(static_cast<Eigen::Index>(times.size()), theta_star->rows());
    }
    for (std::size_t j = 0; j < times.size(); ++j) {
        const double t = times[j];
        Vector decay(P), integ(P);
        for (Eigen::Index k = 0; k < P; ++k) {
            decay(k) = std::exp(-gamma * lam(k) * t);
            integ(k) = lam(k) > 0 ? -std::expm1(-gamma * lam(k) * t) / lam(k) : gamma * t;
        }
        const auto row = static_cast<Eigen::Index>(j);
        out.train.row(row) = (y - V * decay.cwiseProduct(z)).transpose();
        if (with_test) out.test.row(row) = (*f0_test + *theta_star * (V * integ.cwiseProduct(z))).transpose();
    }
    return out;
}

struct LimitReport {
    double short_time_end = 0.0;
    double short_time_deviation = 0.0;  // max_t ||f - f_ntk|| / ||f_ntk|| for 0 < t <= short_time_end
    double late_time = 0.0;
    double late_time_deviation = 0.0;   // ||f(T) - f_gpr|| / ||f_gpr||
    bool late_deviation_monotone = true;  // after the first half of the trajectory
};

inline LimitReport limit_checks(const MeanPredictorTrajectory& traj, const Matrix& Theta0, double gamma,
                                const Matrix& K_gp, const Vector& y, double kappa2) {
    const auto P = y.size();
    require(traj.f.cols() == P && Theta0.rows() == P && K_gp.rows() == P, "limit_checks: dimension mismatch");
    LimitReport rep;
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(Theta0));
    const double norm = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
    rep.short_time_end = 0.1 / (gamma * norm);
    std::vector<double> times;
    for (std::size_t j = 1; j < traj.grid.size() && traj.grid.t(j) <= rep.short_time_end * (1 + 1e-12); ++j)
        times.push_back(traj.grid.t(j));
    if (!times.empty()) {
        const auto flow = ntk_flow(Theta0, y, Vector::Zero(P), gamma, times);
        for (std::size_t j = 0; j < times.size(); ++j) {
            const auto row = static_cast<Eigen::Index>(j);
            const double ref = flow.train.row(row).norm();
            if (ref == 0) continue;
            rep.short_time_deviation = std::max(
                rep.short_time_deviation, (traj.f.row(row + 1) - flow.train.row(row)).norm() / ref);
        }
    }
    const Vector target = gpr_predict(K_gp, K_gp, K_gp.diagonal(), y, kappa2).mean;
    const double tnorm = std::max(target.norm(), 1e-300);
    const auto last = traj.f.rows() - 1;
    rep.late_time = traj.grid.end();
    rep.late_time_deviation = (traj.f.row(last).transpose() - target).norm() / tnorm;
    double prev = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = traj.f.rows() / 2; j <= last; ++j) {
        const double dev = (traj.f.row(j).transpose() - target).norm() / tnorm;
        if (dev > prev * (1 + 1e-9) + 1e-14) rep.late_deviation_monotone = false;
        prev = dev;
    }
    return rep;
}

}  // namespace kt

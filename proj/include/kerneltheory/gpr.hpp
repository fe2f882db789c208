#pragma once

#include "kerneltheory/common.hpp"

#include <optional>

namespace kt {

struct GPRPosterior {
    Vector mean;
    Vector variance;
    Vector train_residual;  // y - K_D alpha
    double jitter = 0.0;    // diagonal shift added to reach a positive-definite factorization
    Eigen::Index rank = 0;  // numerical rank of the system when the pseudo-inverse was used
    bool pseudo_inverse = false;
};

struct LossDecomposition {
    double bias = 0.0;
    double variance = 0.0;
    double total = 0.0;
};

class RankDeficientError : public NumericalError {
public:
    RankDeficientError(Eigen::Index rank, Eigen::Index size)
        : NumericalError("singular kernel system: rank " + std::to_string(rank) + " of " + std::to_string(size)),
          rank_(rank) {}
    Eigen::Index rank() const { return rank_; }

private:
    Eigen::Index rank_;
};

struct SolverOptions {
    bool allow_pseudo_inverse = false;
};

// Solves (K + ridge I) X = B for symmetric PSD K.
class KernelSolver {
public:
    using Options = SolverOptions;

    KernelSolver(const Matrix& K, double ridge, Options opt = {}) {
        require(K.rows() == K.cols(), "kernel system must be square");
        require(ridge >= 0, "ridge must be non-negative");
        n_ = K.rows();
        if (n_ == 0) return;
        const Matrix A = symmetrize(K) + ridge * Matrix::Identity(n_, n_);
        const double scale = std::max(A.diagonal().cwiseAbs().maxCoeff(), 1e-300);
        if (ridge == 0.0) {
            Eigen::SelfAdjointEigenSolver<Matrix> es(A);
            const Vector& ev = es.eigenvalues();
            const double top = std::max(ev.maxCoeff(), 0.0);
            const double tol = top * static_cast<double>(n_) * std::numeric_limits<double>::epsilon() * 16.0;
            rank_ = (ev.array() > tol).count();
            if (rank_ < n_) {
                if (!opt.allow_pseudo_inverse) throw RankDeficientError(rank_, n_);
                Vector inv = Vector::Zero(n_);
                const double cut = 1e-12 * top;
                for (Eigen::Index i = 0; i < n_; ++i)
                    if (ev(i) > cut) inv(i) = 1.0 / ev(i);
                pinv_ = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
                pseudo_ = true;
                return;
            }
        }
        rank_ = n_;
        for (double rel : {0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8}) {
            jitter_ = rel * scale;
            llt_.compute(A + jitter_ * Matrix::Identity(n_, n_));
            if (llt_.info() == Eigen::Success) return;
        }
        throw NumericalError("kernel system is not positive definite even with jitter 1e-8");
    }

    Matrix solve(const Matrix& B) const {
        if (n_ == 0) return Matrix(0, B.cols());
        return pseudo_ ? Matrix(pinv_ * B) : Matrix(llt_.solve(B));
    }

    double jitter() const { return jitter_; }
    bool pseudo_inverse() const { return pseudo_; }
    Eigen::Index rank() const { return rank_; }

private:
    Eigen::Index n_ = 0;
    Eigen::Index rank_ = 0;
    double jitter_ = 0.0;
    bool pseudo_ = false;
    Eigen::LLT<Matrix> llt_;
    Matrix pinv_;
};

// Posterior of GP regression with kernel K_D on the train set, cross block k_star
// (test x train), prior test variances k_star_star, targets y and ridge kappa2.
inline GPRPosterior gpr_predict(const Matrix& K_D, const Matrix& k_star, const Vector& k_star_star,
                                const Vector& y, double kappa2, SolverOptions opt = {}) {
    const auto P = K_D.rows();
    require(K_D.cols() == P && y.size() == P, "gpr_predict: train kernel and targets disagree in size");
    require(k_star.cols() == P, "gpr_predict: cross kernel must be test x train");
    require(k_star_star.size() == k_star.rows(), "gpr_predict: test variance size mismatch");
    require(kappa2 >= 0, "gpr_predict: ridge must be non-negative");
    GPRPosterior post;
    if (P == 0) {
        post.mean = Vector::Zero(k_star.rows());
        post.variance = k_star_star;
        post.train_residual = Vector(0);
        return post;
    }
    const KernelSolver solver(K_D, kappa2, opt);
    const Vector alpha = solver.solve(y);
    post.mean = k_star * alpha;
    const Matrix V = solver.solve(k_star.transpose());
    post.variance = (k_star_star.array() - (k_star.array() * V.transpose().array()).rowwise().sum()).matrix();
    post.variance = post.variance.cwiseMax(0.0);
    post.train_residual = y - K_D * alpha;
    post.jitter = solver.jitter();
    post.rank = solver.rank();
    post.pseudo_inverse = solver.pseudo_inverse();
    return post;
}

struct NtkInfiniteTime {
    Vector prediction;
    Vector init_term;  // I_0 = f0_test - theta_* Theta_D^{-1} f0_train
};

inline NtkInfiniteTime ntk_infinite_time(const Matrix& Theta_D, const Matrix& theta_star, const Vector& y,
                                         const Vector& f0_train, const Vector& f0_test) {
    const auto P = Theta_D.rows();
    require(Theta_D.cols() == P && y.size() == P && f0_train.size() == P, "ntk_infinite_time: train sizes disagree");
    require(theta_star.cols() == P && f0_test.size() == theta_star.rows(), "ntk_infinite_time: test sizes disagree");
    const KernelSolver solver(Theta_D, 0.0);
    NtkInfiniteTime out;
    out.init_term = f0_test - theta_star * solver.solve(f0_train);
    out.prediction = theta_star * solver.solve(y) + out.init_term;
    return out;
}

// Bias and variance of predictors over dataset draws, integrated against test
// weights. `predictions` holds one row per draw.
inline LossDecomposition loss_decompose(const Matrix& predictions, const Vector& y, const Vector& weights) {
    require(predictions.rows() >= 2, "loss_decompose: at least two draws are required");
    require(predictions.cols() == y.size() && y.size() == weights.size(), "loss_decompose: dimension mismatch");
    const Vector mean = predictions.colwise().mean().transpose();
    const Vector second = predictions.array().square().colwise().mean().transpose();
    LossDecomposition out;
    out.bias = (weights.array() * (mean - y).array().square()).sum();
    out.variance = std::max(0.0, (weights.array() * (second - mean.cwiseAbs2()).array()).sum());
    out.total = out.bias + out.variance;
    return out;
}

}  // namespace kt

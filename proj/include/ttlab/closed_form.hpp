#pragma once

#include <cmath>
#include <utility>

#include "ttlab/core.hpp"
#include "ttlab/linalg.hpp"
#include "ttlab/model.hpp"

namespace ttlab {

/// Population loss split into its three summands:
///   total = bias_term + noise_trace_term + noise_floor.
struct LossBreakdown {
    double total = 0.0;
    double bias_term = 0.0;         // beta-quadratic-form part
    double noise_trace_term = 0.0;  // sigma^2 * n * tr(W^T Sigma W Sigma)
    double noise_floor = 0.0;       // sigma^2
};

namespace detail {

struct DiagonalLossInputs {
    const DenseVector* lam;   // feature eigenvalues
    const DenseMatrix* w;     // weights expressed in the eigenbasis
    const DenseVector* beta;  // task expressed in the eigenbasis
};

// Loss evaluation with Sigma = diag(lam). All inner products are O(d^2).
inline LossBreakdown diagonal_population_loss(const DiagonalLossInputs& in, count_t n,
                                              double sigma) {
    const count_t d = in.lam->size();
    const DenseVector& lam = *in.lam;
    const DenseMatrix& w = *in.w;
    const DenseVector& beta = *in.beta;

    DenseVector s(d);  // Sigma beta
    double beta_sigma_beta = 0.0;
    for (count_t i = 0; i < d; ++i) {
        s[i] = lam[i] * beta[i];
        beta_sigma_beta += beta[i] * s[i];
    }
    const DenseVector t = matvec(w, s);  // W Sigma beta
    const double cross = dot(s, t);      // beta^T Sigma W Sigma beta
    double quad = 0.0;                   // beta^T Sigma W^T Sigma W Sigma beta
    for (count_t i = 0; i < d; ++i) quad += lam[i] * t[i] * t[i];
    double trace = 0.0;  // tr(W^T Sigma W Sigma)
    for (count_t i = 0; i < d; ++i) {
        const double* wi = w.row(i);
        double rowacc = 0.0;
        for (count_t j = 0; j < d; ++j) rowacc += lam[j] * wi[j] * wi[j];
        trace += lam[i] * rowacc;
    }

    const double nn = static_cast<double>(n);
    LossBreakdown out;
    out.bias_term = beta_sigma_beta - 2.0 * nn * cross + nn * (nn + 1.0) * quad +
                    nn * trace * beta_sigma_beta;
    out.noise_trace_term = sigma * sigma * nn * trace;
    out.noise_floor = sigma * sigma;
    out.total = out.bias_term + out.noise_trace_term + out.noise_floor;
    return out;
}

}  // namespace detail

/// Exact population loss of the linear attention model on task beta with
/// n context examples:
///   L(W) = beta^T [Sigma - n Sigma W Sigma - n Sigma W^T Sigma
///                  + n(n+1) Sigma W^T Sigma W Sigma
///                  + n tr(W^T Sigma W Sigma) Sigma] beta
///          + sigma^2 n tr(W^T Sigma W Sigma) + sigma^2,   Sigma = Sigma_x.
/// This is the single source of truth for loss evaluation; the Monte-Carlo
/// engine averages it over sampled test-time sets.
inline LossBreakdown population_loss(const AttentionWeights& weights, const CovarianceModel& cov,
                                     const TaskInstance& task, count_t n) {
    weights.validate();
    task.validate();
    if (n == 0) throw ShapeError("population_loss: n must be >= 1");
    if (weights.dim() != cov.dim() || task.beta.size() != cov.dim())
        throw ShapeError("population_loss: dimension mismatch");

    if (cov.identity_basis()) {
        detail::DiagonalLossInputs in{&cov.feature_eigs(), &weights.w, &task.beta};
        return detail::diagonal_population_loss(in, n, task.sigma);
    }
    // Rotate into the shared eigenbasis once, then reuse the diagonal path.
    const DenseMatrix w_hat = matmul(transpose(cov.basis_q()), matmul(weights.w, cov.basis_q()));
    const DenseVector beta_hat = matvec_transposed(cov.basis_q(), task.beta);
    detail::DiagonalLossInputs in{&cov.feature_eigs(), &w_hat, &beta_hat};
    return detail::diagonal_population_loss(in, n, task.sigma);
}

/// Optimal pre-trained weights in the isotropic setting:
/// W* = I / (n + d + 1 + sigma^2); sigma = 0 gives I / (n + d + 1).
inline AttentionWeights pretrained_weights_isotropic(count_t n, count_t d, double sigma) {
    if (n == 0 || d == 0) throw ShapeError("pretrained_weights_isotropic: n, d must be >= 1");
    if (!(sigma >= 0.0)) throw DomainError("pretrained_weights_isotropic: sigma must be >= 0");
    const double c = 1.0 / (static_cast<double>(n) + static_cast<double>(d) + 1.0 + sigma * sigma);
    DenseMatrix w(d, d);
    for (count_t i = 0; i < d; ++i) w(i, i) = c;
    return {std::move(w)};
}

/// Minimal-Frobenius-norm minimizer of the pre-training loss for a jointly
/// diagonalizable covariance pair. In the shared basis the transformed
/// weights are diag(l_i b_i / ((n+1) l_i b_i + M)) with M = sigma^2 + sum l_i b_i,
/// and W* = Sigma_x^{-1/2} (that diagonal) Sigma_x^{-1/2}; directions with
/// zero task eigenvalue map to zero.
inline AttentionWeights pretrained_weights_general(const CovarianceModel& cov, count_t n,
                                                   double sigma) {
    if (n == 0) throw ShapeError("pretrained_weights_general: n must be >= 1");
    if (!(sigma >= 0.0)) throw DomainError("pretrained_weights_general: sigma must be >= 0");
    const count_t d = cov.dim();
    const DenseVector& lam = cov.feature_eigs();
    const DenseVector& tau = cov.task_eigs();

    double m = sigma * sigma;
    for (count_t i = 0; i < d; ++i) m += lam[i] * tau[i];

    DenseVector diag(d, 0.0);
    for (count_t i = 0; i < d; ++i) {
        const double p = lam[i] * tau[i];
        if (p <= 0.0) {
            if (tau[i] > 0.0 && lam[i] <= 0.0)
                throw DomainError(
                    "pretrained_weights_general: zero feature eigenvalue with nonzero task "
                    "eigenvalue (ill-posed direction)");
            continue;  // degenerate direction stays zero (minimal Frobenius norm)
        }
        const double shrunk = p / ((static_cast<double>(n) + 1.0) * p + m);
        diag[i] = shrunk / lam[i];  // undo Sigma_x^{1/2} on both sides
    }

    if (cov.identity_basis()) {
        DenseMatrix w(d, d);
        for (count_t i = 0; i < d; ++i) w(i, i) = diag[i];
        return {std::move(w)};
    }
    const DenseMatrix& q = cov.basis_q();
    DenseMatrix w(d, d);
    for (count_t i = 0; i < d; ++i)
        for (count_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (count_t r = 0; r < d; ++r) acc += q(i, r) * diag[r] * q(j, r);
            w(i, j) = acc;
        }
    return {std::move(w)};
}

/// Minimizer of the population loss for one fixed noiseless task with
/// Sigma_x = I: W_opt = beta beta^T / ((n+2) |beta|^2), whose loss is
/// 2 |beta|^2 / (n+2).
inline AttentionWeights task_optimal_weights(const TaskInstance& task, count_t n) {
    task.validate();
    if (task.sigma != 0.0)
        throw RegimeError("task_optimal_weights: derived for the noiseless setting only");
    const double b2 = dot(task.beta, task.beta);
    if (b2 == 0.0) throw DomainError("task_optimal_weights: beta must be nonzero");
    const count_t d = task.beta.size();
    const double c = 1.0 / ((static_cast<double>(n) + 2.0) * b2);
    DenseMatrix w(d, d);
    for (count_t i = 0; i < d; ++i)
        for (count_t j = 0; j < d; ++j) w(i, j) = c * task.beta[i] * task.beta[j];
    return {std::move(w)};
}

/// Fourth-moment identity for X with n i.i.d. rows ~ N(0, Sigma):
///   E[(X^T X) M (X^T X)] = n(n+1) Sigma M Sigma + n tr(M Sigma) Sigma.
inline DenseMatrix moment_identity(const DenseMatrix& sigma, const DenseMatrix& m, count_t n) {
    if (sigma.rows() != sigma.cols() || m.rows() != m.cols() || sigma.rows() != m.rows())
        throw ShapeError("moment_identity: square matrices of equal size required");
    double scale = 0.0;
    for (count_t i = 0; i < m.rows(); ++i)
        for (count_t j = 0; j < m.cols(); ++j) scale = std::max(scale, std::abs(m(i, j)));
    for (count_t i = 0; i < m.rows(); ++i)
        for (count_t j = i + 1; j < m.cols(); ++j)
            if (std::abs(m(i, j) - m(j, i)) > 1e-12 * std::max(scale, 1.0))
                throw DomainError("moment_identity: M must be symmetric");

    const double nn = static_cast<double>(n);
    DenseMatrix smss = matmul(sigma, matmul(m, sigma));
    double tr_ms = 0.0;
    for (count_t i = 0; i < m.rows(); ++i)
        for (count_t j = 0; j < m.cols(); ++j) tr_ms += m(i, j) * sigma(j, i);
    DenseMatrix out(m.rows(), m.cols());
    for (count_t i = 0; i < m.rows(); ++i)
        for (count_t j = 0; j < m.cols(); ++j)
            out(i, j) = nn * (nn + 1.0) * smss(i, j) + nn * tr_ms * sigma(i, j);
    return out;
}

/// Loss-preserving reparametrization absorbing Sigma_x:
///   W -> Sigma_x^{1/2} W Sigma_x^{1/2},  beta -> Sigma_x^{1/2} beta,
/// after which the feature covariance is the identity.
inline std::pair<AttentionWeights, TaskInstance> covariance_shift(const AttentionWeights& weights,
                                                                  const CovarianceModel& cov,
                                                                  const TaskInstance& task) {
    weights.validate();
    task.validate();
    if (weights.dim() != cov.dim() || task.beta.size() != cov.dim())
        throw ShapeError("covariance_shift: dimension mismatch");
    for (double l : cov.feature_eigs())
        if (l <= 0.0) throw DomainError("covariance_shift: Sigma_x must be positive definite");

    const DenseMatrix root = cov.feature_sqrt();
    AttentionWeights shifted{matmul(root, matmul(weights.w, root))};
    TaskInstance shifted_task{matvec(root, task.beta), task.sigma};
    return {std::move(shifted), std::move(shifted_task)};
}

}  // namespace ttlab

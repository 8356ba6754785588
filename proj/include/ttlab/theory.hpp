#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "ttlab/closed_form.hpp"
#include "ttlab/core.hpp"
#include "ttlab/model.hpp"

namespace ttlab {

enum class RegimeTag { iso_pretrained, zero_init, general_cov };

inline const char* to_string(RegimeTag tag) {
    switch (tag) {
        case RegimeTag::iso_pretrained: return "iso_pretrained";
        case RegimeTag::zero_init: return "zero_init";
        default: return "general_cov";
    }
}

/// Misalignment A = bt^T (I - n Lambda)^2 bt and signal power
/// B = n |bt|^2 tr(Lambda^2), where bt = Q^T Sigma_x^{1/2} beta and Lambda
/// holds the eigenvalues of Sigma_x^{1/2} W Sigma_x^{1/2}.
struct AlignmentQuantities {
    double misalignment_a = 0.0;
    double signal_power_b = 0.0;
    double beta_tilde_norm_sq = 0.0;
};

/// Predicted effect of one optimally sized TTT step.
struct TheoryReport {
    double eta_star = 0.0;
    double initial_loss = 0.0;
    double predicted_improvement = 0.0;
    double predicted_final_loss = 0.0;
    RegimeTag regime = RegimeTag::iso_pretrained;
};

inline AlignmentQuantities alignment_quantities(const AttentionWeights& weights,
                                                const CovarianceModel& cov,
                                                const TaskInstance& task, count_t n) {
    weights.validate();
    task.validate();
    if (weights.dim() != cov.dim() || task.beta.size() != cov.dim())
        throw ShapeError("alignment_quantities: dimension mismatch");
    const count_t d = cov.dim();
    const DenseVector& lam = cov.feature_eigs();

    // V = Lambda_x^{1/2} (Q^T W Q) Lambda_x^{1/2} must be diagonal.
    DenseMatrix g =
        cov.identity_basis()
            ? weights.w
            : matmul(transpose(cov.basis_q()), matmul(weights.w, cov.basis_q()));
    DenseVector eig(d, 0.0);
    double off_sq = 0.0, total_sq = 0.0;
    for (count_t i = 0; i < d; ++i)
        for (count_t j = 0; j < d; ++j) {
            const double v = std::sqrt(lam[i]) * g(i, j) * std::sqrt(lam[j]);
            total_sq += v * v;
            if (i == j)
                eig[i] = v;
            else
                off_sq += v * v;
        }
    if (std::sqrt(off_sq) > 1e-10 * std::sqrt(total_sq) + 1e-300)
        throw DomainError("alignment_quantities: W is not diagonal in the covariance basis");

    const double upper = 1.0 / (static_cast<double>(n) + 1.0);
    for (count_t i = 0; i < d; ++i)
        if (eig[i] < -1e-12 || eig[i] > upper + 1e-12)
            throw DomainError("alignment_quantities: eigenvalue outside [0, 1/(n+1)]");

    // beta_tilde = Lambda_x^{1/2} Q^T beta.
    DenseVector bt = cov.identity_basis() ? task.beta : matvec_transposed(cov.basis_q(), task.beta);
    for (count_t i = 0; i < d; ++i) bt[i] *= std::sqrt(lam[i]);

    AlignmentQuantities out;
    const double nn = static_cast<double>(n);
    for (count_t i = 0; i < d; ++i) {
        const double c = 1.0 - nn * eig[i];
        out.misalignment_a += bt[i] * bt[i] * c * c;
        out.beta_tilde_norm_sq += bt[i] * bt[i];
        out.signal_power_b += eig[i] * eig[i];
    }
    out.signal_power_b *= nn * out.beta_tilde_norm_sq;
    return out;
}

/// Leading-order optimal step size for the isotropic pre-trained start:
/// eta* ~ d / (2 (k+d) n^2 (n+d) |beta|^2).
inline double iso_pretrained_eta_star_leading(count_t n, count_t d, count_t k,
                                              double beta_norm_sq) {
    if (beta_norm_sq <= 0.0) return 0.0;
    const double nn = n, dd = d, kk = k;
    return dd / (2.0 * (kk + dd) * nn * nn * (nn + dd) * beta_norm_sq);
}

/// Leading-order improvement: (k/(k+d)) (d/(n+d))^3 |beta|^2.
inline double iso_pretrained_improvement_leading(count_t n, count_t d, count_t k,
                                                 double beta_norm_sq) {
    const double nn = n, dd = d, kk = k;
    const double a = dd / (nn + dd);
    return kk / (kk + dd) * a * a * a * beta_norm_sq;
}

/// Prediction for TTT from the isotropic pre-trained weights W* = I/(n+d+1),
/// noiseless regime. The report carries the full-derivation variants
///   eta* = d / (2 (k+d+1) (n^2+d) (n+d) |beta|^2)
///   gain = k/(k+d+1) * d^3 / ((n+d+1)^2 (n+d) (1 + d/n^2)) * |beta|^2,
/// which track finite sizes more closely than the leading-order forms; the
/// initial loss is the exact |beta|^2 (d+1)/(n+d+1).
inline TheoryReport predict_iso_pretrained(count_t n, count_t d, count_t k, double beta_norm_sq) {
    if (n == 0 || d == 0) throw ShapeError("predict_iso_pretrained: n, d must be >= 1");
    if (!(beta_norm_sq >= 0.0)) throw DomainError("predict_iso_pretrained: |beta|^2 < 0");
    const double nn = n, dd = d, kk = k;
    TheoryReport rep;
    rep.regime = RegimeTag::iso_pretrained;
    rep.initial_loss = beta_norm_sq * (dd + 1.0) / (nn + dd + 1.0);
    if (beta_norm_sq > 0.0)
        rep.eta_star = dd / (2.0 * (kk + dd + 1.0) * (nn * nn + dd) * (nn + dd) * beta_norm_sq);
    rep.predicted_improvement = kk / (kk + dd + 1.0) * dd * dd * dd /
                                ((nn + dd + 1.0) * (nn + dd + 1.0) * (nn + dd) *
                                 (1.0 + dd / (nn * nn))) *
                                beta_norm_sq;
    rep.predicted_final_loss = rep.initial_loss - rep.predicted_improvement;
    return rep;
}

/// Prediction for TTT from W = 0 ("training from scratch"), valid for any
/// noise level. With D1 = sigma^2 d + (k+d+1)|beta|^2 and
/// D2 = sigma^4 d + |beta|^4 (n^2+4n+3+d) + 2 sigma^2 (n+d+1) |beta|^2:
///   eta* = |beta|^4 / (2 D1 D2),  gain = k n^2 |beta|^8 / (D1 D2).
/// sigma = 0 recovers eta* = 1/(2(k+d+1)(n^2+4n+3+d)|beta|^2) and
/// gain = k/(k+d+1) * n^2/(n^2+4n+3+d) * |beta|^2.
inline TheoryReport predict_zero_init(count_t n, count_t d, count_t k, double beta_norm_sq,
                                      double sigma) {
    if (n == 0 || d == 0) throw ShapeError("predict_zero_init: n, d must be >= 1");
    if (!(beta_norm_sq >= 0.0)) throw DomainError("predict_zero_init: |beta|^2 < 0");
    if (!(sigma >= 0.0)) throw DomainError("predict_zero_init: sigma must be >= 0");
    const double nn = n, dd = d, kk = k;
    const double b2 = beta_norm_sq, s2 = sigma * sigma;
    TheoryReport rep;
    rep.regime = RegimeTag::zero_init;
    rep.initial_loss = b2 + s2;
    if (b2 > 0.0) {
        const double d1 = s2 * dd + (kk + dd + 1.0) * b2;
        const double d2 = s2 * s2 * dd + b2 * b2 * (nn * nn + 4.0 * nn + 3.0 + dd) +
                          2.0 * s2 * (nn + dd + 1.0) * b2;
        rep.eta_star = b2 * b2 / (2.0 * d1 * d2);
        rep.predicted_improvement = kk * nn * nn * b2 * b2 * b2 * b2 / (d1 * d2);
    }
    rep.predicted_final_loss = rep.initial_loss - rep.predicted_improvement;
    return rep;
}

/// Prediction for TTT from any weights that are jointly diagonal with the
/// covariance pair (noiseless):
///   eta* ~ A / (2 (k+d) n^2 |bt|^2 (A+B)),
///   gain ~ (k/(k+d)) A^2/(A+B),  initial ~ A + B.
inline TheoryReport predict_general_cov(const AttentionWeights& weights,
                                        const CovarianceModel& cov, const TaskInstance& task,
                                        count_t n, count_t d, count_t k) {
    if (task.sigma != 0.0)
        throw RegimeError("predict_general_cov: derived for the noiseless regime only");
    if (d != cov.dim()) throw ShapeError("predict_general_cov: d does not match covariance");
    const AlignmentQuantities aq = alignment_quantities(weights, cov, task, n);
    const double a = aq.misalignment_a, b = aq.signal_power_b, bt2 = aq.beta_tilde_norm_sq;
    const double nn = n, dd = d, kk = k;
    TheoryReport rep;
    rep.regime = RegimeTag::general_cov;
    rep.initial_loss = a + b;
    if (a + b > 0.0 && bt2 > 0.0) {
        rep.eta_star = a / (2.0 * (kk + dd) * nn * nn * bt2 * (a + b));
        rep.predicted_improvement = kk / (kk + dd) * a * a / (a + b);
    }
    rep.predicted_final_loss = rep.initial_loss - rep.predicted_improvement;
    return rep;
}

/// Critical alpha = n/d below/above which the post-TTT loss rises/falls:
/// sqrt(3 gamma / (gamma+1)) - 1, defined only for gamma > 1/2; for smaller
/// gamma the loss is monotonic in alpha and the threshold is absent.
inline std::optional<double> nonmonotonic_threshold(double gamma) {
    if (!(gamma > 0.0)) throw DomainError("nonmonotonic_threshold: gamma must be > 0");
    if (gamma <= 0.5) return std::nullopt;
    return std::sqrt(3.0 * gamma / (gamma + 1.0)) - 1.0;
}

/// Phase-transition gamma* = (alpha+1)^2 / (alpha+2): for gamma below it the
/// pre-trained start wins, above it the zero start wins.
inline double phase_transition_iso(double alpha) {
    if (!(alpha > 0.0)) throw DomainError("phase_transition_iso: alpha must be > 0");
    return (alpha + 1.0) * (alpha + 1.0) / (alpha + 2.0);
}

/// General-covariance phase transition in terms of c1 = A/|bt|^2 and
/// c2 = B/|bt|^2; a negative result means the zero start always wins.
inline double phase_transition_general(double c1, double c2) {
    if (!(c1 >= 0.0)) throw DomainError("phase_transition_general: c1 must be >= 0");
    if (!(c2 > 0.0)) throw DomainError("phase_transition_general: c2 must be > 0");
    const double s = c1 + c2;
    return (s - s * s) / (c2 * (2.0 * c1 + c2));
}

}  // namespace ttlab

#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "ttlab/core.hpp"
#include "ttlab/linalg.hpp"
#include "ttlab/rng.hpp"

namespace ttlab {

/// Jointly diagonalizable covariance pair: Sigma_x = Q diag(feature_eigs) Q^T
/// and Sigma_beta = Q diag(task_eigs) Q^T with a shared orthonormal basis Q.
class CovarianceModel {
public:
    static CovarianceModel isotropic(count_t d) {
        return diagonal(DenseVector(d, 1.0), DenseVector(d, 1.0));
    }

    static CovarianceModel diagonal(DenseVector feature_eigs, DenseVector task_eigs) {
        CovarianceModel m;
        m.dim_ = feature_eigs.size();
        m.feature_eigs_ = std::move(feature_eigs);
        m.task_eigs_ = std::move(task_eigs);
        m.identity_basis_ = true;
        m.validate();
        return m;
    }

    static CovarianceModel with_basis(DenseMatrix q, DenseVector feature_eigs,
                                      DenseVector task_eigs) {
        CovarianceModel m;
        m.dim_ = feature_eigs.size();
        m.feature_eigs_ = std::move(feature_eigs);
        m.task_eigs_ = std::move(task_eigs);
        m.basis_q_ = std::move(q);
        m.identity_basis_ = false;
        if (m.basis_q_.rows() != m.dim_ || m.basis_q_.cols() != m.dim_)
            throw ShapeError("CovarianceModel: basis must be d x d");
        const DenseMatrix gram = matmul(transpose(m.basis_q_), m.basis_q_);
        if (max_abs_diff(gram, identity(m.dim_)) > 1e-12)
            throw DomainError("CovarianceModel: basis is not orthonormal to 1e-12");
        m.validate();
        return m;
    }

    count_t dim() const { return dim_; }
    bool identity_basis() const { return identity_basis_; }
    const DenseVector& feature_eigs() const { return feature_eigs_; }
    const DenseVector& task_eigs() const { return task_eigs_; }
    const DenseMatrix& basis_q() const { return basis_q_; }

    bool feature_isotropic() const {
        for (double l : feature_eigs_)
            if (l != 1.0) return false;
        return true;
    }
    bool fully_isotropic() const {
        if (!feature_isotropic()) return false;
        for (double l : task_eigs_)
            if (l != 1.0) return false;
        return true;
    }

    DenseMatrix sigma_x() const { return assemble(feature_eigs_, 1.0); }
    DenseMatrix sigma_beta() const { return assemble(task_eigs_, 1.0); }
    /// Q diag(sqrt(lambda_x)) as a sampling factor: F F^T = Sigma_x.
    DenseMatrix feature_sqrt_factor() const { return assemble(feature_eigs_, 0.5); }
    DenseMatrix feature_sqrt() const { return assemble_sym(feature_eigs_, 0.5); }

    /// v -> Q diag(f(lambda)) Q^T v without forming the matrix.
    DenseVector apply_sigma_x(const DenseVector& v) const { return apply(feature_eigs_, v); }

private:
    void validate() const {
        if (dim_ == 0) throw ShapeError("CovarianceModel: dimension must be >= 1");
        if (task_eigs_.size() != dim_)
            throw ShapeError("CovarianceModel: eigenvalue vectors differ in length");
        for (double l : feature_eigs_)
            if (!(l >= 0.0)) throw DomainError("CovarianceModel: feature eigenvalue < 0");
        for (double l : task_eigs_)
            if (!(l >= 0.0)) throw DomainError("CovarianceModel: task eigenvalue < 0");
    }

    // Q diag(lambda^power); power 1.0 with the symmetric variant gives the
    // full covariance, power 0.5 the square-root factor.
    DenseMatrix assemble(const DenseVector& eigs, double power) const {
        DenseMatrix scaled(dim_, dim_);
        if (identity_basis_) {
            for (count_t i = 0; i < dim_; ++i) scaled(i, i) = std::pow(eigs[i], power);
            return scaled;
        }
        for (count_t i = 0; i < dim_; ++i)
            for (count_t j = 0; j < dim_; ++j) scaled(i, j) = basis_q_(i, j) * std::pow(eigs[j], power);
        if (power == 0.5) return scaled;  // factor form Q diag(sqrt(l)), enough for sampling
        return matmul(scaled, transpose(basis_q_));
    }

    DenseMatrix assemble_sym(const DenseVector& eigs, double power) const {
        if (identity_basis_) {
            DenseMatrix m(dim_, dim_);
            for (count_t i = 0; i < dim_; ++i) m(i, i) = std::pow(eigs[i], power);
            return m;
        }
        DenseMatrix scaled(dim_, dim_);
        for (count_t i = 0; i < dim_; ++i)
            for (count_t j = 0; j < dim_; ++j) scaled(i, j) = basis_q_(i, j) * std::pow(eigs[j], power);
        return matmul(scaled, transpose(basis_q_));
    }

    DenseVector apply(const DenseVector& eigs, const DenseVector& v) const {
        if (v.size() != dim_) throw ShapeError("CovarianceModel: vector dimension mismatch");
        if (identity_basis_) {
            DenseVector out(dim_);
            for (count_t i = 0; i < dim_; ++i) out[i] = eigs[i] * v[i];
            return out;
        }
        DenseVector t = matvec_transposed(basis_q_, v);
        for (count_t i = 0; i < dim_; ++i) t[i] *= eigs[i];
        return matvec(basis_q_, t);
    }

    count_t dim_ = 0;
    DenseMatrix basis_q_;
    DenseVector feature_eigs_;
    DenseVector task_eigs_;
    bool identity_basis_ = true;
};

/// Collapsed query-key matrix of the one-layer linear attention model.
struct AttentionWeights {
    DenseMatrix w;

    static AttentionWeights zero(count_t d) { return {DenseMatrix(d, d)}; }
    count_t dim() const { return w.rows(); }

    void validate() const {
        if (w.rows() != w.cols() || w.rows() == 0)
            throw ShapeError("AttentionWeights: matrix must be square and nonempty");
        if (!w.all_finite()) throw DomainError("AttentionWeights: non-finite entry");
    }
};

struct TaskInstance {
    DenseVector beta;
    double sigma = 0.0;

    void validate() const {
        if (beta.empty()) throw ShapeError("TaskInstance: empty task vector");
        for (double b : beta)
            if (!std::isfinite(b)) throw DomainError("TaskInstance: non-finite beta");
        if (!(sigma >= 0.0)) throw DomainError("TaskInstance: sigma must be >= 0");
    }
};

/// One sampled test-time set: n context rows and k query-training rows.
struct TestTimeSet {
    DenseMatrix x_ctx;   // n x d
    DenseVector y_ctx;   // n
    DenseMatrix x_tr;    // k x d (k may be 0)
    DenseVector y_tr;    // k

    count_t n() const { return x_ctx.rows(); }
    count_t k() const { return y_tr.size(); }
    count_t d() const { return x_ctx.cols(); }
};

struct StepSchedule {
    double eta0 = 0.0;
    double decay = 1.0;
    count_t steps = 1;

    void validate() const {
        if (!(eta0 > 0.0)) throw DomainError("StepSchedule: eta0 must be > 0");
        if (!(decay > 0.0 && decay <= 1.0)) throw DomainError("StepSchedule: decay in (0,1]");
        if (steps == 0) throw DomainError("StepSchedule: steps must be >= 1");
    }
};

/// Prediction of the sequence model: x^T W (X_ctx^T y_ctx).
inline double forward(const AttentionWeights& weights, const DenseMatrix& x_ctx,
                      const DenseVector& y_ctx, const DenseVector& x_query) {
    if (x_ctx.rows() != y_ctx.size() || x_ctx.cols() != weights.w.cols() ||
        x_query.size() != weights.w.rows())
        throw ShapeError("forward: dimension mismatch");
    const DenseVector u = matvec_transposed(x_ctx, y_ctx);
    return dot(x_query, matvec(weights.w, u));
}

namespace detail {

/// Draws one (x, y) pair in-place; d feature gaussians then one noise
/// gaussian, so the stream layout is identical for every consumer.
inline double sample_row(RngState& rng, const CovarianceModel& cov, const TaskInstance& task,
                         DenseVector& x_out, DenseVector& z_scratch) {
    const count_t d = cov.dim();
    if (cov.identity_basis()) {
        const DenseVector& lam = cov.feature_eigs();
        double y = 0.0;
        for (count_t j = 0; j < d; ++j) {
            const double xj = std::sqrt(lam[j]) * rng.next_gaussian();
            x_out[j] = xj;
            y += xj * task.beta[j];
        }
        return y + task.sigma * rng.next_gaussian();
    }
    for (count_t j = 0; j < d; ++j)
        z_scratch[j] = std::sqrt(cov.feature_eigs()[j]) * rng.next_gaussian();
    const DenseMatrix& q = cov.basis_q();
    double y = 0.0;
    for (count_t i = 0; i < d; ++i) {
        const double* qi = q.row(i);
        double acc = 0.0;
        for (count_t j = 0; j < d; ++j) acc += qi[j] * z_scratch[j];
        x_out[i] = acc;
        y += acc * task.beta[i];
    }
    return y + task.sigma * rng.next_gaussian();
}

}  // namespace detail

/// Draws S_TT: n+k i.i.d. rows x_i ~ N(0, Sigma_x) with labels
/// y_i = x_i^T beta + sigma * xi_i. The first n rows form the context
/// block, the remaining k rows the query-training block.
inline TestTimeSet sample_test_time_set(RngState& rng, const CovarianceModel& cov,
                                        const TaskInstance& task, count_t n, count_t k) {
    task.validate();
    if (task.beta.size() != cov.dim())
        throw ShapeError("sample_test_time_set: task dimension mismatch");
    if (n == 0) throw ShapeError("sample_test_time_set: n must be >= 1");
    const count_t d = cov.dim();
    TestTimeSet set;
    set.x_ctx = DenseMatrix(n, d);
    set.y_ctx.resize(n);
    set.x_tr = DenseMatrix(k, d);
    set.y_tr.resize(k);
    DenseVector row(d), scratch(d);
    for (count_t i = 0; i < n; ++i) {
        set.y_ctx[i] = detail::sample_row(rng, cov, task, row, scratch);
        std::copy(row.begin(), row.end(), set.x_ctx.row(i));
    }
    for (count_t i = 0; i < k; ++i) {
        set.y_tr[i] = detail::sample_row(rng, cov, task, row, scratch);
        std::copy(row.begin(), row.end(), set.x_tr.row(i));
    }
    return set;
}

/// Sum of squared errors of the model over the k query rows, with the
/// context block fixed.
inline double empirical_train_loss(const AttentionWeights& weights, const TestTimeSet& set) {
    if (set.x_ctx.cols() != weights.w.cols()) throw ShapeError("empirical_train_loss: dim mismatch");
    if (set.k() == 0) return 0.0;
    const DenseVector u = matvec_transposed(set.x_ctx, set.y_ctx);
    const DenseVector v = matvec(weights.w, u);
    double loss = 0.0;
    for (count_t j = 0; j < set.k(); ++j) {
        const double* xj = set.x_tr.row(j);
        double pred = 0.0;
        for (count_t c = 0; c < set.d(); ++c) pred += xj[c] * v[c];
        const double r = set.y_tr[j] - pred;
        loss += r * r;
    }
    return loss;
}

namespace detail {

/// Residual-weighted accumulation p = X_tr^T (y_tr - X_tr v), row by row.
/// Both the materialized and the streamed trial paths run exactly this
/// loop so their results agree bitwise.
inline void accumulate_update_direction(const double* x_row, double y, const DenseVector& v,
                                        DenseVector& p) {
    const count_t d = v.size();
    double pred = 0.0;
    for (count_t c = 0; c < d; ++c) pred += x_row[c] * v[c];
    const double r = y - pred;
    for (count_t c = 0; c < d; ++c) p[c] += r * x_row[c];
}

inline void apply_rank_one_update(DenseMatrix& w, double two_eta, const DenseVector& p,
                                  const DenseVector& u) {
    const count_t d = u.size();
    for (count_t i = 0; i < d; ++i) {
        double* wi = w.row(i);
        const double f = two_eta * p[i];
        for (count_t j = 0; j < d; ++j) wi[j] += f * u[j];
    }
}

}  // namespace detail

/// One gradient-descent step on the test-time training loss:
/// W' = W + 2 eta X_tr^T (y_tr - X_tr W u) u^T with u = X_ctx^T y_ctx.
/// The factor 2 from the squared-error gradient stays inside this update,
/// so eta here is directly comparable with the closed-form step sizes.
inline AttentionWeights ttt_step(const AttentionWeights& weights, const TestTimeSet& set,
                                 double eta) {
    weights.validate();
    if (!(eta >= 0.0)) throw DomainError("ttt_step: eta must be >= 0");
    if (set.d() != weights.dim() || set.x_tr.cols() != weights.dim())
        throw ShapeError("ttt_step: dimension mismatch");
    AttentionWeights out = weights;
    if (set.k() == 0 || eta == 0.0) return out;
    const DenseVector u = matvec_transposed(set.x_ctx, set.y_ctx);
    const DenseVector v = matvec(weights.w, u);
    DenseVector p(set.d(), 0.0);
    for (count_t j = 0; j < set.k(); ++j)
        detail::accumulate_update_direction(set.x_tr.row(j), set.y_tr[j], v, p);
    detail::apply_rank_one_update(out.w, 2.0 * eta, p, u);
    return out;
}

/// Multi-step TTT with geometric step decay: step t uses eta0 * decay^t.
inline AttentionWeights ttt_multi_step(const AttentionWeights& weights, const TestTimeSet& set,
                                       const StepSchedule& schedule) {
    schedule.validate();
    AttentionWeights w = weights;
    double eta = schedule.eta0;
    for (count_t t = 0; t < schedule.steps; ++t) {
        w = ttt_step(w, set, eta);
        eta *= schedule.decay;
    }
    return w;
}

}  // namespace ttlab

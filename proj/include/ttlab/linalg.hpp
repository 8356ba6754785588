#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "ttlab/core.hpp"
#include "ttlab/rng.hpp"

namespace ttlab {

using DenseVector = std::vector<double>;

/// Row-major dense matrix of doubles.
///
/// Every matrix produced by an operation in this header has rows >= 1 and
/// cols >= 1. A 0 x d matrix is representable only because the model layer
/// needs an empty query block (k = 0); no linalg operation creates one.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(count_t rows, count_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), a_(rows * cols, fill) {}

    count_t rows() const { return rows_; }
    count_t cols() const { return cols_; }

    double& operator()(count_t i, count_t j) { return a_[i * cols_ + j]; }
    double operator()(count_t i, count_t j) const { return a_[i * cols_ + j]; }

    double* data() { return a_.data(); }
    const double* data() const { return a_.data(); }
    double* row(count_t i) { return a_.data() + i * cols_; }
    const double* row(count_t i) const { return a_.data() + i * cols_; }

    bool all_finite() const {
        for (double x : a_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    bool operator==(const DenseMatrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && a_ == o.a_;
    }

private:
    count_t rows_ = 0;
    count_t cols_ = 0;
    std::vector<double> a_;
};

inline DenseMatrix identity(count_t d) {
    DenseMatrix m(d, d);
    for (count_t i = 0; i < d; ++i) m(i, i) = 1.0;
    return m;
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.rows()) + ")");
    DenseMatrix c(a.rows(), b.cols());
    for (count_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (count_t k = 0; k < a.cols(); ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b.row(k);
            for (count_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix t(a.cols(), a.rows());
    for (count_t i = 0; i < a.rows(); ++i)
        for (count_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline DenseVector matvec(const DenseMatrix& a, const DenseVector& x) {
    if (a.cols() != x.size()) throw ShapeError("matvec: dimension mismatch");
    DenseVector y(a.rows(), 0.0);
    for (count_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i);
        double acc = 0.0;
        for (count_t j = 0; j < x.size(); ++j) acc += ai[j] * x[j];
        y[i] = acc;
    }
    return y;
}

inline DenseVector matvec_transposed(const DenseMatrix& a, const DenseVector& x) {
    if (a.rows() != x.size()) throw ShapeError("matvec_transposed: dimension mismatch");
    DenseVector y(a.cols(), 0.0);
    for (count_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i);
        const double xi = x[i];
        for (count_t j = 0; j < a.cols(); ++j) y[j] += xi * ai[j];
    }
    return y;
}

inline DenseMatrix outer(const DenseVector& u, const DenseVector& v) {
    DenseMatrix m(u.size(), v.size());
    for (count_t i = 0; i < u.size(); ++i)
        for (count_t j = 0; j < v.size(); ++j) m(i, j) = u[i] * v[j];
    return m;
}

inline double dot(const DenseVector& u, const DenseVector& v) {
    if (u.size() != v.size()) throw ShapeError("dot: dimension mismatch");
    double acc = 0.0;
    for (count_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
    return acc;
}

inline double norm2(const DenseVector& v) { return std::sqrt(dot(v, v)); }

inline double frobenius_norm_sq(const DenseMatrix& a) {
    double acc = 0.0;
    for (count_t i = 0; i < a.rows(); ++i)
        for (count_t j = 0; j < a.cols(); ++j) acc += a(i, j) * a(i, j);
    return acc;
}

inline double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (count_t i = 0; i < a.rows(); ++i)
        for (count_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
    return m;
}

/// Matrix with i.i.d. rows ~ N(0, F F^T), where F is a square-root factor
/// of the desired row covariance. Deterministic given the rng state.
inline DenseMatrix random_gaussian_matrix(RngState& rng, count_t rows, count_t cols,
                                          const DenseMatrix& row_cov_factor) {
    if (rows == 0 || cols == 0) throw ShapeError("random_gaussian_matrix: empty shape");
    if (row_cov_factor.rows() != cols || row_cov_factor.cols() != cols)
        throw ShapeError("random_gaussian_matrix: factor must be cols x cols");
    DenseMatrix x(rows, cols);
    DenseVector z(cols);
    for (count_t i = 0; i < rows; ++i) {
        for (count_t j = 0; j < cols; ++j) z[j] = rng.next_gaussian();
        double* xi = x.row(i);
        for (count_t r = 0; r < cols; ++r) {
            const double* fr = row_cov_factor.row(r);
            double acc = 0.0;
            for (count_t j = 0; j < cols; ++j) acc += fr[j] * z[j];
            xi[r] = acc;
        }
    }
    return x;
}

/// Haar-distributed orthonormal matrix via Householder QR of a Gaussian
/// matrix, with the sign convention diag(R) > 0.
inline DenseMatrix random_orthonormal(RngState& rng, count_t d) {
    if (d == 0) throw ShapeError("random_orthonormal: d must be >= 1");
    DenseMatrix a(d, d);
    for (count_t i = 0; i < d; ++i)
        for (count_t j = 0; j < d; ++j) a(i, j) = rng.next_gaussian();

    DenseMatrix q = identity(d);
    std::vector<double> v(d);
    for (count_t k = 0; k < d; ++k) {
        double norm = 0.0;
        for (count_t i = k; i < d; ++i) norm += a(i, k) * a(i, k);
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        const double alpha = a(k, k) >= 0.0 ? -norm : norm;
        double vnorm_sq = 0.0;
        v[k] = a(k, k) - alpha;
        for (count_t i = k + 1; i < d; ++i) v[i] = a(i, k);
        for (count_t i = k; i < d; ++i) vnorm_sq += v[i] * v[i];
        if (vnorm_sq == 0.0) continue;

        // Apply H = I - 2 v v^T / (v^T v) from the left to A and to Q^T rows.
        for (count_t j = k; j < d; ++j) {
            double s = 0.0;
            for (count_t i = k; i < d; ++i) s += v[i] * a(i, j);
            const double f = 2.0 * s / vnorm_sq;
            for (count_t i = k; i < d; ++i) a(i, j) -= f * v[i];
        }
        for (count_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (count_t i = k; i < d; ++i) s += v[i] * q(i, j);
            const double f = 2.0 * s / vnorm_sq;
            for (count_t i = k; i < d; ++i) q(i, j) -= f * v[i];
        }
    }
    // Rows of q now hold Q^T of A = QR. Fix signs so that diag(R) > 0 and
    // return Q itself (columns orthonormal, Haar-distributed).
    DenseMatrix out(d, d);
    for (count_t i = 0; i < d; ++i) {
        const double sign = a(i, i) >= 0.0 ? 1.0 : -1.0;
        for (count_t j = 0; j < d; ++j) out(j, i) = sign * q(i, j);
    }
    return out;
}

/// Entrywise pseudo-inverse of a nonnegative diagonal, with entries at or
/// below rel_tol * max(v) treated as exact zeros.
inline DenseVector diag_pseudoinverse(const DenseVector& v, double rel_tol = 1e-12) {
    double vmax = 0.0;
    for (double x : v) {
        if (x < 0.0) throw DomainError("diag_pseudoinverse: negative entry");
        vmax = std::max(vmax, x);
    }
    const double cut = rel_tol * vmax;
    DenseVector out(v.size(), 0.0);
    for (count_t i = 0; i < v.size(); ++i) out[i] = v[i] > cut ? 1.0 / v[i] : 0.0;
    return out;
}

namespace detail {

/// Lower-triangular Cholesky factor of a small PSD matrix; zero pivots are
/// tolerated (semidefinite input), negative pivots are rejected.
inline DenseMatrix cholesky_factor(const DenseMatrix& s, double tol = 1e-10) {
    if (s.rows() != s.cols()) throw ShapeError("cholesky_factor: square matrix required");
    const count_t d = s.rows();
    double scale = 0.0;
    for (count_t i = 0; i < d; ++i) scale = std::max(scale, std::abs(s(i, i)));
    DenseMatrix l(d, d);
    for (count_t j = 0; j < d; ++j) {
        double diag = s(j, j);
        for (count_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
        if (diag < -tol * std::max(scale, 1.0))
            throw DomainError("cholesky_factor: matrix is not positive semidefinite");
        if (diag <= tol * std::max(scale, 1.0)) {
            for (count_t i = j; i < d; ++i) l(i, j) = 0.0;
            continue;
        }
        const double root = std::sqrt(diag);
        l(j, j) = root;
        for (count_t i = j + 1; i < d; ++i) {
            double acc = s(i, j);
            for (count_t k = 0; k < j; ++k) acc -= l(i, k) * l(j, k);
            l(i, j) = acc / root;
        }
    }
    return l;
}

}  // namespace detail

}  // namespace ttlab

#include <gtest/gtest.h>

#include <cmath>

#include "ttlab/linalg.hpp"
#include "ttlab/rng.hpp"

using namespace ttlab;

namespace {

// Independent triple-loop product used as the oracle for matmul.
DenseMatrix slow_multiply(const DenseMatrix& a, const DenseMatrix& b) {
    DenseMatrix c(a.rows(), b.cols());
    for (count_t i = 0; i < a.rows(); ++i)
        for (count_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (count_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
            c(i, j) = acc;
        }
    return c;
}

DenseMatrix random_matrix(RngState& rng, count_t rows, count_t cols) {
    DenseMatrix m(rows, cols);
    for (count_t i = 0; i < rows; ++i)
        for (count_t j = 0; j < cols; ++j) m(i, j) = rng.next_gaussian();
    return m;
}

}  // namespace

TEST(Matmul, IdentityTimesIdentity) {
    const DenseMatrix i2 = identity(2);
    EXPECT_EQ(matmul(i2, i2), i2);
}

TEST(Matmul, HandComputedProduct) {
    DenseMatrix a(2, 2), b(2, 2);
    a(0, 0) = 1; a(0, 1) = 2; a(1, 0) = 3; a(1, 1) = 4;
    b(0, 0) = 0; b(0, 1) = 1; b(1, 0) = 1; b(1, 1) = 0;
    const DenseMatrix c = matmul(a, b);
    EXPECT_DOUBLE_EQ(c(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(c(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(c(1, 0), 4.0);
    EXPECT_DOUBLE_EQ(c(1, 1), 3.0);
    EXPECT_EQ(c, slow_multiply(a, b));
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(DenseMatrix(2, 3), DenseMatrix(2, 2)), ShapeError);
}

TEST(Matmul, AssociativityOnRandomTriples) {
    RngState rng(42);
    for (int rep = 0; rep < 50; ++rep) {
        const count_t a = 1 + rng.next_u64() % 6, b = 1 + rng.next_u64() % 6,
                      c = 1 + rng.next_u64() % 6, d = 1 + rng.next_u64() % 6;
        const DenseMatrix x = random_matrix(rng, a, b);
        const DenseMatrix y = random_matrix(rng, b, c);
        const DenseMatrix z = random_matrix(rng, c, d);
        const DenseMatrix left = matmul(matmul(x, y), z);
        const DenseMatrix right = matmul(x, matmul(y, z));
        double scale = 1e-30;
        for (count_t i = 0; i < left.rows(); ++i)
            for (count_t j = 0; j < left.cols(); ++j)
                scale = std::max(scale, std::abs(left(i, j)));
        EXPECT_LE(max_abs_diff(left, right), 1e-9 * scale);
    }
}

TEST(RandomGaussianMatrix, IdentityCovarianceMatchesSampleMoments) {
    RngState rng(7);
    const count_t d = 4, rows = 100000;
    const DenseMatrix x = random_gaussian_matrix(rng, rows, d, identity(d));
    DenseMatrix cov(d, d);
    for (count_t r = 0; r < rows; ++r)
        for (count_t i = 0; i < d; ++i)
            for (count_t j = 0; j < d; ++j) cov(i, j) += x(r, i) * x(r, j);
    const double se_diag = std::sqrt(2.0 / rows);
    const double se_off = std::sqrt(1.0 / rows);
    for (count_t i = 0; i < d; ++i)
        for (count_t j = 0; j < d; ++j) {
            const double got = cov(i, j) / rows;
            const double want = i == j ? 1.0 : 0.0;
            EXPECT_NEAR(got, want, 3.0 * (i == j ? se_diag : se_off))
                << "entry (" << i << "," << j << ")";
        }
}

TEST(RandomGaussianMatrix, ZeroRowsThrows) {
    RngState rng(1);
    EXPECT_THROW(random_gaussian_matrix(rng, 0, 3, identity(3)), ShapeError);
}

TEST(RandomGaussianMatrix, ZeroCovarianceGivesZeroRows) {
    RngState rng(1);
    const DenseMatrix x = random_gaussian_matrix(rng, 5, 3, DenseMatrix(3, 3));
    EXPECT_EQ(frobenius_norm_sq(x), 0.0);
}

TEST(RandomOrthonormal, ScalarCaseIsSignOnly) {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        RngState rng(seed);
        const DenseMatrix q = random_orthonormal(rng, 1);
        EXPECT_DOUBLE_EQ(std::abs(q(0, 0)), 1.0);
    }
}

TEST(RandomOrthonormal, OrthonormalToTolerance) {
    RngState rng(3);
    const DenseMatrix q = random_orthonormal(rng, 8);
    EXPECT_LE(max_abs_diff(matmul(transpose(q), q), identity(8)), 1e-12);
}

TEST(RandomOrthonormal, DeterministicGivenSeed) {
    RngState a(99), b(99);
    EXPECT_EQ(random_orthonormal(a, 6), random_orthonormal(b, 6));
}

TEST(RandomOrthonormal, PreservesNorms) {
    RngState rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        const count_t d = 2 + rng.next_u64() % 9;
        const DenseMatrix q = random_orthonormal(rng, d);
        DenseVector x(d);
        for (auto& v : x) v = rng.next_gaussian();
        const double nx = norm2(x);
        EXPECT_NEAR(norm2(matvec(q, x)), nx, 1e-10 * nx);
    }
}

TEST(DiagPseudoinverse, EntrywiseReciprocalKeepingZeros) {
    const DenseVector out = diag_pseudoinverse({1.0, 4.0, 0.0});
    EXPECT_DOUBLE_EQ(out[0], 1.0);
    EXPECT_DOUBLE_EQ(out[1], 0.25);
    EXPECT_DOUBLE_EQ(out[2], 0.0);
}

TEST(DiagPseudoinverse, AllZeroVectorMapsToItself) {
    const DenseVector out = diag_pseudoinverse({0.0, 0.0, 0.0});
    for (double x : out) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(DiagPseudoinverse, NegativeEntryThrows) {
    EXPECT_THROW(diag_pseudoinverse({1.0, -1.0}), DomainError);
}

TEST(DiagPseudoinverse, TripleProductRestoresKeptEntriesExactlyForDyadics) {
    // Reciprocals of powers of two are exact, so the round trip must be too.
    const DenseVector v = {0.5, 2.0, 64.0, 0.0, 0.0078125, 1.0};
    const DenseVector pinv = diag_pseudoinverse(v);
    for (count_t i = 0; i < v.size(); ++i)
        if (pinv[i] != 0.0) {
            EXPECT_EQ(v[i] * pinv[i] * v[i], v[i]);
        }
}

TEST(DiagPseudoinverse, TripleProductWithinOneUlpOnRandomEntries) {
    // For general doubles x * (1/x) can land one ulp off 1, so the round
    // trip is exact only to the neighbouring representable value.
    RngState rng(5);
    for (int rep = 0; rep < 200; ++rep) {
        DenseVector v(6);
        for (auto& x : v) {
            x = rng.next_unit();
            if (rng.next_unit() < 0.3) x = 0.0;
            if (rng.next_unit() < 0.2) x *= 1e-14;  // lands below the relative cut
        }
        const DenseVector pinv = diag_pseudoinverse(v);
        for (count_t i = 0; i < v.size(); ++i) {
            if (pinv[i] == 0.0) continue;
            const double round_trip = v[i] * pinv[i] * v[i];
            EXPECT_GE(round_trip, std::nextafter(v[i], 0.0));
            EXPECT_LE(round_trip, std::nextafter(v[i], 2.0 * v[i]));
        }
    }
}

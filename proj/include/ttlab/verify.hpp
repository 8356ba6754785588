#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "ttlab/closed_form.hpp"
#include "ttlab/core.hpp"
#include "ttlab/montecarlo.hpp"

namespace ttlab {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct SuiteResult {
    std::string suite;
    std::vector<CheckResult> checks;

    bool passed() const {
        for (const CheckResult& c : checks)
            if (!c.passed) return false;
        return true;
    }
};

namespace detail {

inline void add_check(SuiteResult& suite, const std::string& name, bool ok,
                      const std::string& detail_text) {
    suite.checks.push_back({name, ok, detail_text});
}

inline std::string fmt(const char* pattern, double a, double b) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), pattern, a, b);
    return buf;
}

}  // namespace detail

/// Sampling check: E[(X^T X) M (X^T X)] = n(n+1) Sigma M Sigma + n tr(M Sigma) Sigma,
/// each configuration within 5 elementwise standard errors.
inline SuiteResult verify_moments(std::uint64_t seed, count_t samples = 1000000) {
    SuiteResult suite{"moments", {}};
    RngState rng(seed ^ 0x6d6f6d656e747355ULL);

    struct Case {
        const char* name;
        DenseMatrix sigma;
        DenseMatrix m;
        count_t n;
    };
    std::vector<Case> cases;
    cases.push_back({"identity_d2_n3", identity(2), identity(2), 3});
    {
        DenseMatrix sigma(2, 2), m(2, 2);
        sigma(0, 0) = 1.5;
        sigma(1, 1) = 0.7;
        m(0, 0) = 1.0;
        cases.push_back({"rank_one_m_d2_n4", sigma, m, 4});
    }
    {
        DenseMatrix sigma(1, 1), m(1, 1);
        sigma(0, 0) = 0.8;
        m(0, 0) = 1.3;
        cases.push_back({"scalar_chi_square_n5", sigma, m, 5});
    }
    {
        DenseMatrix sigma(2, 2), m(2, 2);
        sigma(0, 0) = 1.0;
        sigma(1, 1) = 2.0;
        m(0, 0) = 0.4;
        m(0, 1) = m(1, 0) = -0.3;
        m(1, 1) = 1.1;
        cases.push_back({"wick_single_row_n1", sigma, m, 1});
    }
    {
        DenseMatrix sigma(4, 4), m(4, 4);
        RngState local(seed + 11);
        for (count_t i = 0; i < 4; ++i) sigma(i, i) = 0.4 + 1.6 * local.next_unit();
        for (count_t i = 0; i < 4; ++i)
            for (count_t j = i; j < 4; ++j) m(i, j) = m(j, i) = 2.0 * local.next_unit() - 1.0;
        cases.push_back({"random_symmetric_d4_n6", sigma, m, 6});
    }

    for (const Case& c : cases) {
        const MomentCheck chk = verify_moment_identity_detail(rng, c.sigma, c.m, c.n, samples);
        detail::add_check(suite, c.name, chk.max_dev_in_se <= 5.0,
                          detail::fmt("max deviation %.3f standard errors (limit %.1f)",
                                      chk.max_dev_in_se, 5.0));
    }

    // Scalar case against the chi-square moment E[(chi^2_n)^2] = n(n+2):
    // for d = 1, Sigma = [s], M = [m] the identity must equal n(n+2) s^2 m.
    {
        const count_t n = 5;
        const double s = 0.8, m = 1.3;
        DenseMatrix sig(1, 1), mm(1, 1);
        sig(0, 0) = s;
        mm(0, 0) = m;
        const double exact = moment_identity(sig, mm, n)(0, 0);
        const double oracle = static_cast<double>(n) * (static_cast<double>(n) + 2.0) * s * s * m;
        detail::add_check(suite, "scalar_fourth_moment_formula",
                          std::abs(exact - oracle) <= 1e-12 * std::abs(oracle),
                          detail::fmt("closed form %.12g vs chi-square oracle %.12g", exact,
                                      oracle));
    }
    return suite;
}

/// Update check: the analytic rank-1 TTT update equals the gradient of the
/// empirical training loss (central differences), and its delta has
/// numerical rank one.
inline SuiteResult verify_gradients(std::uint64_t seed, count_t max_dim = 5) {
    SuiteResult suite{"gradients", {}};
    if (max_dim < 2 || max_dim > 5) throw DomainError("verify_gradients: max_dim must be 2..5");
    RngState rng(seed ^ 0x677261646965ULL);
    for (int inst = 0; inst < 5; ++inst) {
        const count_t d = 2 + static_cast<count_t>(rng.next_u64() % (max_dim - 1));
        const count_t n = 2 + static_cast<count_t>(rng.next_u64() % 7);
        const count_t k = 1 + static_cast<count_t>(rng.next_u64() % 6);
        TestTimeSet set;
        set.x_ctx = DenseMatrix(n, d);
        set.y_ctx.resize(n);
        set.x_tr = DenseMatrix(k, d);
        set.y_tr.resize(k);
        auto uni = [&] { return 2.0 * rng.next_unit() - 1.0; };
        for (count_t i = 0; i < n; ++i) {
            for (count_t j = 0; j < d; ++j) set.x_ctx(i, j) = uni();
            set.y_ctx[i] = uni();
        }
        for (count_t i = 0; i < k; ++i) {
            for (count_t j = 0; j < d; ++j) set.x_tr(i, j) = uni();
            set.y_tr[i] = uni();
        }
        AttentionWeights w{DenseMatrix(d, d)};
        for (count_t i = 0; i < d; ++i)
            for (count_t j = 0; j < d; ++j) w.w(i, j) = uni();

        // ttt_step with eta = 1 gives W - grad, so grad = W - W'.
        const AttentionWeights stepped = ttt_step(w, set, 1.0);
        DenseMatrix analytic(d, d);
        for (count_t i = 0; i < d; ++i)
            for (count_t j = 0; j < d; ++j) analytic(i, j) = w.w(i, j) - stepped.w(i, j);
        const DenseMatrix numeric = finite_diff_gradient(w, set, 1e-5);
        const double err = max_abs_diff(analytic, numeric);
        detail::add_check(suite, "gradient_matches_fd_" + std::to_string(inst), err <= 1e-6,
                          detail::fmt("max abs deviation %.3g (limit %.1g)", err, 1e-6));

        DenseMatrix delta(d, d);
        for (count_t i = 0; i < d; ++i)
            for (count_t j = 0; j < d; ++j) delta(i, j) = stepped.w(i, j) - w.w(i, j);
        const auto [s1, s2] = top_two_singular_values(delta);
        const bool rank_ok = s1 == 0.0 || s2 <= 1e-10 * s1;
        detail::add_check(suite, "update_rank_one_" + std::to_string(inst), rank_ok,
                          detail::fmt("sigma2/sigma1 = %.3g (limit %.1g)",
                                      s1 == 0.0 ? 0.0 : s2 / s1, 1e-10));
    }

    // Empty query block: the finite-difference gradient must vanish.
    {
        TestTimeSet set;
        set.x_ctx = DenseMatrix(2, 2);
        set.x_ctx(0, 0) = 1.0;
        set.x_ctx(1, 1) = 1.0;
        set.y_ctx = {1.0, -1.0};
        set.x_tr = DenseMatrix(0, 2);
        const DenseMatrix g = finite_diff_gradient(AttentionWeights::zero(2), set, 1e-5);
        detail::add_check(suite, "empty_query_gradient_zero", frobenius_norm_sq(g) == 0.0,
                          "gradient of an empty training block");
    }
    return suite;
}

/// Invariance check: the covariance shift preserves the population loss.
inline SuiteResult verify_shift(std::uint64_t seed, count_t instances = 100) {
    SuiteResult suite{"shift", {}};
    RngState rng(seed ^ 0x736869667431ULL);
    double worst = 0.0;
    bool all_ok = true;
    for (count_t inst = 0; inst < instances; ++inst) {
        const count_t d = 2 + static_cast<count_t>(rng.next_u64() % 5);
        const count_t n = 1 + static_cast<count_t>(rng.next_u64() % 10);
        DenseVector lam(d), tau(d), beta(d);
        for (count_t i = 0; i < d; ++i) {
            lam[i] = 0.2 + 2.3 * rng.next_unit();
            tau[i] = (rng.next_unit() < 0.25) ? 0.0 : 2.0 * rng.next_unit();
            beta[i] = rng.next_gaussian();
        }
        const CovarianceModel cov = (inst % 2 == 0)
                                        ? CovarianceModel::diagonal(lam, tau)
                                        : CovarianceModel::with_basis(random_orthonormal(rng, d),
                                                                      lam, tau);
        AttentionWeights w{DenseMatrix(d, d)};
        for (count_t i = 0; i < d; ++i)
            for (count_t j = 0; j < d; ++j) w.w(i, j) = 0.6 * (2.0 * rng.next_unit() - 1.0) /
                                                        static_cast<double>(n);
        const double sigma = (inst % 3 == 0) ? 0.5 : 0.0;
        const TaskInstance task{beta, sigma};

        const double original = population_loss(w, cov, task, n).total;
        const auto [w_bar, task_bar] = covariance_shift(w, cov, task);
        const double shifted =
            population_loss(w_bar, CovarianceModel::isotropic(d), task_bar, n).total;
        const double rel = std::abs(original - shifted) / std::max(std::abs(original), 1e-30);
        worst = std::max(worst, rel);
        all_ok = all_ok && rel <= 1e-10;
    }
    detail::add_check(suite, "loss_preserved_" + std::to_string(instances) + "_instances", all_ok,
                      detail::fmt("worst relative gap %.3g (limit %.1g)", worst, 1e-10));
    return suite;
}

/// Stability check: eigenvalues of Sigma_x^{1/2} W* Sigma_x^{1/2} lie in
/// [0, 1/(n+1)], measured on the assembled matrix by power iteration.
inline SuiteResult verify_eigs(std::uint64_t seed, count_t instances = 50) {
    SuiteResult suite{"eigs", {}};
    RngState rng(seed ^ 0x656967736a57ULL);
    bool all_ok = true;
    double worst_margin = 0.0;
    for (count_t inst = 0; inst < instances; ++inst) {
        const count_t d = 2 + static_cast<count_t>(rng.next_u64() % 7);
        const count_t n = 1 + static_cast<count_t>(rng.next_u64() % 50);
        DenseVector lam(d), tau(d);
        for (count_t i = 0; i < d; ++i) {
            lam[i] = 0.2 + 2.8 * rng.next_unit();
            tau[i] = (rng.next_unit() < 0.3) ? 0.0 : 2.0 * rng.next_unit();
        }
        const double sigma = rng.next_unit();
        const CovarianceModel cov = (inst % 2 == 0)
                                        ? CovarianceModel::diagonal(lam, tau)
                                        : CovarianceModel::with_basis(random_orthonormal(rng, d),
                                                                      lam, tau);
        const AttentionWeights wstar = pretrained_weights_general(cov, n, sigma);
        const DenseMatrix root = cov.feature_sqrt();
        const DenseMatrix shifted = matmul(root, matmul(wstar.w, root));

        const double upper = 1.0 / (static_cast<double>(n) + 1.0);
        // For a symmetric matrix: sigma_max(M) <= u and sigma_max(uI - M) <= u
        // together pin every eigenvalue into [0, u].
        const double smax = top_two_singular_values(shifted).first;
        DenseMatrix reflected(d, d);
        for (count_t i = 0; i < d; ++i)
            for (count_t j = 0; j < d; ++j)
                reflected(i, j) = (i == j ? upper : 0.0) - shifted(i, j);
        const double rmax = top_two_singular_values(reflected).first;
        const double tol = 1e-9 * upper;
        const bool ok = smax <= upper + tol && rmax <= upper + tol;
        all_ok = all_ok && ok;
        worst_margin = std::max(worst_margin, std::max(smax, rmax) - upper);
    }
    detail::add_check(suite, "eigenvalues_within_bound_" + std::to_string(instances) + "_models",
                      all_ok,
                      detail::fmt("worst exceedance over 1/(n+1): %.3g (tolerance %.1g)",
                                  worst_margin, 1e-9));
    return suite;
}

/// Coupling check: the Gaussian coupling residual obeys E|e|^2 <= 9(n+d)/n^2
/// and the g component has covariance I/n.
inline SuiteResult verify_gaussian_approx(std::uint64_t seed, count_t n = 100, count_t d = 50,
                                          count_t samples = 10000) {
    SuiteResult suite{"gaussian_approx", {}};
    RngState rng(seed ^ 0x676175737331ULL);
    DenseVector w(d);
    for (count_t i = 0; i < d; ++i) w[i] = 1.0 + 0.5 * std::sin(static_cast<double>(i));
    const double nrm = norm2(w);
    for (double& x : w) x /= nrm;

    const GaussianCouplingStats st = gaussian_coupling_stats(rng, n, d, w, samples);
    const double bound =
        9.0 * (static_cast<double>(n) + static_cast<double>(d)) / (static_cast<double>(n) * n);
    detail::add_check(suite, "residual_second_moment_bound",
                      st.e_sq_mean <= bound + 3.0 * st.e_sq_stderr,
                      detail::fmt("E|e|^2 estimate %.5f vs bound %.5f (+3 stderr)", st.e_sq_mean,
                                  bound));
    detail::add_check(
        suite, "g_diag_covariance",
        std::abs(st.g_diag_mean - 1.0 / static_cast<double>(n)) <= 3.0 * st.g_diag_se,
        detail::fmt("mean diagonal %.6g vs 1/n = %.6g (3 stderr)", st.g_diag_mean,
                    1.0 / static_cast<double>(n)));
    detail::add_check(suite, "g_offdiag_covariance",
                      std::abs(st.g_offdiag_mean) <= 3.0 * st.g_offdiag_se,
                      detail::fmt("mean off-diagonal %.3g (3 stderr = %.3g)", st.g_offdiag_mean,
                                  3.0 * st.g_offdiag_se));
    detail::add_check(suite, "q_mean_equals_w", st.q_dev_norm <= 3.0 * st.q_dev_se,
                      detail::fmt("|mean(q) - w| = %.4g (3 aggregate stderr = %.4g)",
                                  st.q_dev_norm, 3.0 * st.q_dev_se));
    return suite;
}

inline std::vector<SuiteResult> run_verify(const std::string& suite, std::uint64_t seed) {
    std::vector<SuiteResult> out;
    const bool all = suite == "all";
    if (all || suite == "moments") out.push_back(verify_moments(seed));
    if (all || suite == "gradients") out.push_back(verify_gradients(seed));
    if (all || suite == "shift") out.push_back(verify_shift(seed));
    if (all || suite == "eigs") out.push_back(verify_eigs(seed));
    if (all || suite == "gaussian_approx") out.push_back(verify_gaussian_approx(seed));
    if (out.empty())
        throw ParseError("unknown verify suite '" + suite +
                         "' (expected all|moments|gradients|shift|eigs|gaussian_approx)");
    return out;
}

}  // namespace ttlab

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <thread>
#include <utility>
#include <vector>

#include "ttlab/closed_form.hpp"
#include "ttlab/core.hpp"
#include "ttlab/linalg.hpp"
#include "ttlab/model.hpp"
#include "ttlab/rng.hpp"
#include "ttlab/theory.hpp"

namespace ttlab {

enum class InitKind { pretrained, zero, explicit_w };
enum class EtaPolicyKind { theory_iso, theory_zero, theory_general, manual };

inline const char* to_string(InitKind k) {
    switch (k) {
        case InitKind::pretrained: return "pretrained";
        case InitKind::zero: return "zero";
        default: return "explicit";
    }
}

inline const char* to_string(EtaPolicyKind p) {
    switch (p) {
        case EtaPolicyKind::theory_iso: return "theory_iso";
        case EtaPolicyKind::theory_zero: return "theory_zero";
        case EtaPolicyKind::theory_general: return "theory_general";
        default: return "manual";
    }
}

/// One Monte-Carlo experiment: estimate E[L(W_TT)] over sampled test-time
/// sets for a fixed covariance model, task, and update policy.
struct TrialConfig {
    CovarianceModel cov = CovarianceModel::isotropic(1);
    TaskInstance task;
    count_t n = 0;
    count_t k = 0;
    count_t d = 0;
    InitKind init = InitKind::pretrained;
    AttentionWeights explicit_w;  // used only when init == explicit_w
    EtaPolicyKind eta_policy = EtaPolicyKind::theory_iso;
    double manual_eta = 0.0;  // used only when eta_policy == manual
    count_t steps = 1;        // >1 runs multi-step TTT with geometric decay
    double decay = 1.0;
    count_t trials = 0;
    std::uint64_t base_seed = 0;

    void validate() const {
        task.validate();
        if (d == 0 || n == 0) throw ShapeError("TrialConfig: n, d must be >= 1");
        if (d != cov.dim() || task.beta.size() != d)
            throw ShapeError("TrialConfig: dimension mismatch");
        if (trials == 0) throw ShapeError("TrialConfig: trials must be >= 1");
        if (steps == 0) throw DomainError("TrialConfig: steps must be >= 1");
        if (!(decay > 0.0 && decay <= 1.0)) throw DomainError("TrialConfig: decay in (0,1]");
        if (init == InitKind::explicit_w && explicit_w.dim() != d)
            throw ShapeError("TrialConfig: explicit weights have wrong dimension");
    }
};

struct MCEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    count_t trials = 0;
};

inline AttentionWeights resolve_initial_weights(const TrialConfig& cfg) {
    switch (cfg.init) {
        case InitKind::pretrained:
            return pretrained_weights_general(cfg.cov, cfg.n, cfg.task.sigma);
        case InitKind::zero:
            return AttentionWeights::zero(cfg.d);
        default:
            cfg.explicit_w.validate();
            return cfg.explicit_w;
    }
}

/// Maps the step-size policy to a concrete eta, rejecting regimes the
/// corresponding closed form does not cover.
inline double resolve_step_size(const TrialConfig& cfg, const AttentionWeights& w0) {
    const double b2 = dot(cfg.task.beta, cfg.task.beta);
    switch (cfg.eta_policy) {
        case EtaPolicyKind::manual:
            if (!(cfg.manual_eta >= 0.0)) throw DomainError("manual eta must be >= 0");
            return cfg.manual_eta;
        case EtaPolicyKind::theory_iso:
            if (cfg.task.sigma != 0.0)
                throw RegimeError("theory_iso step policy requires sigma = 0");
            if (!cfg.cov.fully_isotropic())
                throw RegimeError("theory_iso step policy requires isotropic covariances");
            return predict_iso_pretrained(cfg.n, cfg.d, cfg.k, b2).eta_star;
        case EtaPolicyKind::theory_zero:
            if (!cfg.cov.feature_isotropic())
                throw RegimeError("theory_zero step policy requires Sigma_x = I");
            return predict_zero_init(cfg.n, cfg.d, cfg.k, b2, cfg.task.sigma).eta_star;
        default:
            return predict_general_cov(w0, cfg.cov, cfg.task, cfg.n, cfg.d, cfg.k).eta_star;
    }
}

namespace detail {

// Query blocks larger than this (entries) are regenerated from a saved rng
// state per step instead of being stored.
constexpr count_t kMaterializeLimit = count_t(1) << 24;

struct TrialPlan {
    const TrialConfig* cfg = nullptr;
    const AttentionWeights* w0 = nullptr;
    double eta0 = 0.0;
    bool materialize = true;
};

/// Runs one trial and records the population loss after every TTT step.
/// The draw order matches sample_test_time_set exactly, so a trial equals
/// ttt_multi_step on the set sampled from the same stream.
inline void run_trial(const TrialPlan& plan, std::uint64_t trial_index, double* losses_out) {
    const TrialConfig& cfg = *plan.cfg;
    const count_t d = cfg.d, n = cfg.n, k = cfg.k;
    RngState rng = RngState::for_stream(cfg.base_seed, trial_index);

    DenseVector row(d), scratch(d), u(d, 0.0);
    for (count_t i = 0; i < n; ++i) {
        const double y = sample_row(rng, cfg.cov, cfg.task, row, scratch);
        for (count_t j = 0; j < d; ++j) u[j] += y * row[j];
    }

    DenseMatrix x_tr;
    DenseVector y_tr;
    RngState query_stream = rng;  // replay point for the streamed path
    if (plan.materialize && k > 0) {
        x_tr = DenseMatrix(k, d);
        y_tr.resize(k);
        for (count_t i = 0; i < k; ++i) {
            y_tr[i] = sample_row(rng, cfg.cov, cfg.task, row, scratch);
            std::copy(row.begin(), row.end(), x_tr.row(i));
        }
    }

    AttentionWeights cur = *plan.w0;
    double eta = plan.eta0;
    DenseVector p(d);
    for (count_t s = 0; s < cfg.steps; ++s) {
        if (k > 0 && eta != 0.0) {
            const DenseVector v = matvec(cur.w, u);
            std::fill(p.begin(), p.end(), 0.0);
            if (plan.materialize) {
                for (count_t j = 0; j < k; ++j)
                    accumulate_update_direction(x_tr.row(j), y_tr[j], v, p);
            } else {
                RngState replay = query_stream;
                for (count_t j = 0; j < k; ++j) {
                    const double y = sample_row(replay, cfg.cov, cfg.task, row, scratch);
                    accumulate_update_direction(row.data(), y, v, p);
                }
            }
            apply_rank_one_update(cur.w, 2.0 * eta, p, u);
        }
        losses_out[s] = population_loss(cur, cfg.cov, cfg.task, n).total;
        eta *= cfg.decay;
    }
}

inline MCEstimate summarize(const double* losses, count_t trials) {
    MCEstimate est;
    est.trials = trials;
    KahanSum sum;
    double lo = losses[0], hi = losses[0];
    for (count_t t = 0; t < trials; ++t) {
        sum.add(losses[t]);
        lo = std::min(lo, losses[t]);
        hi = std::max(hi, losses[t]);
    }
    est.mean = sum.value() / static_cast<double>(trials);
    if (trials > 1 && lo != hi) {
        KahanSum sq;
        for (count_t t = 0; t < trials; ++t) {
            const double dev = losses[t] - est.mean;
            sq.add(dev * dev);
        }
        est.std_error =
            std::sqrt(sq.value() / (static_cast<double>(trials) * (static_cast<double>(trials) - 1.0)));
    }
    return est;
}

}  // namespace detail

/// Estimates E[L(W_TT)] after each of cfg.steps TTT steps; element s of the
/// result is the estimate after s+1 steps. Deterministic in (base_seed,
/// trials) and independent of the number of worker threads: trial t always
/// uses stream t, and aggregation runs in trial order with compensated
/// summation.
inline std::vector<MCEstimate> estimate_ttt_trajectory(const TrialConfig& cfg,
                                                       unsigned threads = 0) {
    cfg.validate();
    const AttentionWeights w0 = resolve_initial_weights(cfg);
    detail::TrialPlan plan;
    plan.cfg = &cfg;
    plan.w0 = &w0;
    plan.eta0 = resolve_step_size(cfg, w0);
    plan.materialize = cfg.k * cfg.d <= detail::kMaterializeLimit;

    const count_t trials = cfg.trials, steps = cfg.steps;
    std::vector<double> losses(trials * steps);

    unsigned workers = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
    workers = static_cast<unsigned>(std::min<count_t>(workers, trials));
    if (workers <= 1) {
        for (count_t t = 0; t < trials; ++t) detail::run_trial(plan, t, &losses[t * steps]);
    } else {
        std::atomic<count_t> next{0};
        auto worker = [&] {
            for (;;) {
                const count_t t = next.fetch_add(1);
                if (t >= trials) return;
                detail::run_trial(plan, t, &losses[t * steps]);
            }
        };
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (unsigned i = 0; i < workers; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    std::vector<MCEstimate> out(steps);
    std::vector<double> column(trials);
    for (count_t s = 0; s < steps; ++s) {
        for (count_t t = 0; t < trials; ++t) column[t] = losses[t * steps + s];
        out[s] = detail::summarize(column.data(), trials);
    }
    return out;
}

/// Estimate after the full schedule (the last trajectory point).
inline MCEstimate estimate_ttt_loss(const TrialConfig& cfg, unsigned threads = 0) {
    return estimate_ttt_trajectory(cfg, threads).back();
}

/// Sampling diagnostics for the Gaussian coupling q = w + g + e, where
/// q = (1/n) X^T X w, g ~ N(0, I/n), and e is the residual whose second
/// moment is bounded by 9 (n+d) / n^2.
struct GaussianCouplingStats {
    count_t n = 0, d = 0, samples = 0;
    double e_sq_mean = 0.0;
    double e_sq_stderr = 0.0;
    DenseMatrix g_covariance;   // empirical, expect I/n
    double g_diag_mean = 0.0;   // mean of diagonal entries, expect 1/n
    double g_diag_se = 0.0;     // analytic stderr of that mean under g ~ N(0, I/n)
    double g_offdiag_mean = 0.0;  // mean of upper off-diagonal entries, expect 0
    double g_offdiag_se = 0.0;
    DenseVector q_mean;         // expect w
    double q_dev_norm = 0.0;    // |q_mean - w|
    double q_dev_se = 0.0;      // stderr of the entrywise mean deviation, aggregated
};

inline GaussianCouplingStats gaussian_coupling_stats(RngState& rng, count_t n, count_t d,
                                                     const DenseVector& w_unit, count_t samples) {
    if (n == 0 || d == 0 || samples == 0)
        throw ShapeError("gaussian_coupling_stats: n, d, samples must be >= 1");
    if (w_unit.size() != d) throw ShapeError("gaussian_coupling_stats: w has wrong dimension");
    if (std::abs(norm2(w_unit) - 1.0) > 1e-10)
        throw DomainError("gaussian_coupling_stats: w must be a unit vector");

    GaussianCouplingStats st;
    st.n = n;
    st.d = d;
    st.samples = samples;
    st.g_covariance = DenseMatrix(d, d);
    st.q_mean.assign(d, 0.0);

    std::vector<double> x(n * d);
    DenseVector h(n), g(d), q(d), e(d);
    detail::KahanSum e_sum, e_sq_sum;
    std::vector<detail::KahanSum> q_sum(d), q_sq_sum(d);
    std::vector<double> gcov(d * d, 0.0);

    const double sqrt_n = std::sqrt(static_cast<double>(n));
    for (count_t s = 0; s < samples; ++s) {
        for (double& v : x) v = rng.next_gaussian();
        // h = X w, its norm, and v^T h with fresh v ~ N(0, I_n).
        double h_sq = 0.0, vth = 0.0;
        for (count_t i = 0; i < n; ++i) {
            const double* xi = &x[i * d];
            double acc = 0.0;
            for (count_t j = 0; j < d; ++j) acc += xi[j] * w_unit[j];
            h[i] = acc;
            h_sq += acc * acc;
        }
        for (count_t i = 0; i < n; ++i) vth += rng.next_gaussian() * h[i];
        const double h_norm = std::sqrt(h_sq);

        // X^T h, then g = (X^T h - w (|h|^2 - v^T h)) / (sqrt(n) |h|)
        // and q = X^T h / n.
        std::fill(q.begin(), q.end(), 0.0);
        for (count_t i = 0; i < n; ++i) {
            const double* xi = &x[i * d];
            const double hi = h[i];
            for (count_t j = 0; j < d; ++j) q[j] += hi * xi[j];
        }
        double e_sq = 0.0;
        for (count_t j = 0; j < d; ++j) {
            const double xth = q[j];
            g[j] = (xth - w_unit[j] * (h_sq - vth)) / (sqrt_n * h_norm);
            q[j] = xth / static_cast<double>(n);
            e[j] = q[j] - w_unit[j] - g[j];
            e_sq += e[j] * e[j];
            q_sum[j].add(q[j]);
            q_sq_sum[j].add((q[j] - w_unit[j]) * (q[j] - w_unit[j]));
        }
        e_sum.add(e_sq);
        e_sq_sum.add(e_sq * e_sq);
        for (count_t i = 0; i < d; ++i)
            for (count_t j = 0; j < d; ++j) gcov[i * d + j] += g[i] * g[j];
    }

    const double ss = static_cast<double>(samples);
    st.e_sq_mean = e_sum.value() / ss;
    const double e_var = std::max(0.0, e_sq_sum.value() / ss - st.e_sq_mean * st.e_sq_mean);
    st.e_sq_stderr = std::sqrt(e_var / ss);

    double diag = 0.0, off = 0.0;
    for (count_t i = 0; i < d; ++i)
        for (count_t j = 0; j < d; ++j) {
            const double c = gcov[i * d + j] / ss;
            st.g_covariance(i, j) = c;
            if (i == j)
                diag += c;
            else if (j > i)
                off += c;
        }
    const double nn = static_cast<double>(n), dd = static_cast<double>(d);
    st.g_diag_mean = diag / dd;
    st.g_diag_se = std::sqrt(2.0 / (nn * nn * ss * dd));
    const double pairs = dd * (dd - 1.0) / 2.0;
    st.g_offdiag_mean = pairs > 0.0 ? off / pairs : 0.0;
    st.g_offdiag_se = pairs > 0.0 ? std::sqrt(1.0 / (nn * nn * ss * pairs)) : 0.0;

    double dev_sq = 0.0, dev_var = 0.0;
    for (count_t j = 0; j < d; ++j) {
        const double m = q_sum[j].value() / ss;
        st.q_mean[j] = m;
        const double dev = m - w_unit[j];
        dev_sq += dev * dev;
        dev_var += q_sq_sum[j].value() / ss;  // ~ per-sample Var(q_j)
    }
    st.q_dev_norm = std::sqrt(dev_sq);
    st.q_dev_se = std::sqrt(dev_var / ss);  // stderr of the deviation vector norm scale
    return st;
}

/// Monte-Carlo estimate of E|e|^2 for the Gaussian coupling; the contract
/// is estimate <= 9 (n+d)/n^2 + 3 * stderr.
inline double gaussian_residual_stats(RngState& rng, count_t n, count_t d,
                                      const DenseVector& w_unit, count_t samples) {
    return gaussian_coupling_stats(rng, n, d, w_unit, samples).e_sq_mean;
}

struct MomentCheck {
    DenseMatrix mc_mean;
    DenseMatrix exact;
    DenseMatrix std_err;
    double max_dev_in_se = 0.0;  // max_ij |mc - exact| / stderr
};

/// Empirical check of E[(X^T X) M (X^T X)] against the closed form; returns
/// the largest elementwise deviation measured in standard errors.
inline MomentCheck verify_moment_identity_detail(RngState& rng, const DenseMatrix& sigma,
                                                 const DenseMatrix& m, count_t n,
                                                 count_t samples) {
    if (samples == 0) throw ShapeError("verify_moment_identity: samples must be >= 1");
    const DenseMatrix exact = moment_identity(sigma, m, n);  // validates shapes and symmetry
    const count_t d = sigma.rows();
    const DenseMatrix factor = detail::cholesky_factor(sigma);

    std::vector<double> x(n * d), z(d);
    DenseMatrix gram(d, d), t(d, d), tm(d, d);
    std::vector<detail::KahanSum> sum(d * d), sum_sq(d * d);

    for (count_t s = 0; s < samples; ++s) {
        for (count_t i = 0; i < n; ++i) {
            for (count_t j = 0; j < d; ++j) z[j] = rng.next_gaussian();
            for (count_t r = 0; r < d; ++r) {
                double acc = 0.0;
                for (count_t c = 0; c <= r; ++c) acc += factor(r, c) * z[c];
                x[i * d + r] = acc;
            }
        }
        for (count_t a = 0; a < d; ++a)
            for (count_t b = 0; b < d; ++b) {
                double acc = 0.0;
                for (count_t i = 0; i < n; ++i) acc += x[i * d + a] * x[i * d + b];
                gram(a, b) = acc;
            }
        for (count_t a = 0; a < d; ++a)
            for (count_t b = 0; b < d; ++b) {
                double acc = 0.0;
                for (count_t c = 0; c < d; ++c) acc += gram(a, c) * m(c, b);
                tm(a, b) = acc;
            }
        for (count_t a = 0; a < d; ++a)
            for (count_t b = 0; b < d; ++b) {
                double acc = 0.0;
                for (count_t c = 0; c < d; ++c) acc += tm(a, c) * gram(c, b);
                t(a, b) = acc;
                sum[a * d + b].add(acc);
                sum_sq[a * d + b].add(acc * acc);
            }
    }

    MomentCheck chk;
    chk.mc_mean = DenseMatrix(d, d);
    chk.exact = exact;
    chk.std_err = DenseMatrix(d, d);
    const double ss = static_cast<double>(samples);
    for (count_t a = 0; a < d; ++a)
        for (count_t b = 0; b < d; ++b) {
            const double mean = sum[a * d + b].value() / ss;
            const double var = std::max(0.0, sum_sq[a * d + b].value() / ss - mean * mean);
            const double se = std::sqrt(var / ss);
            chk.mc_mean(a, b) = mean;
            chk.std_err(a, b) = se;
            const double dev = std::abs(mean - exact(a, b));
            if (se > 0.0)
                chk.max_dev_in_se = std::max(chk.max_dev_in_se, dev / se);
            else if (dev > 0.0)
                chk.max_dev_in_se = std::numeric_limits<double>::infinity();
        }
    return chk;
}

inline double verify_moment_identity(RngState& rng, const DenseMatrix& sigma, const DenseMatrix& m,
                                     count_t n, count_t samples) {
    return verify_moment_identity_detail(rng, sigma, m, n, samples).max_dev_in_se;
}

/// Central-difference gradient of the empirical training loss in W.
inline DenseMatrix finite_diff_gradient(const AttentionWeights& weights, const TestTimeSet& set,
                                        double epsilon = 1e-5) {
    if (!(epsilon >= 1e-8 && epsilon <= 1e-3))
        throw DomainError("finite_diff_gradient: epsilon must lie in [1e-8, 1e-3]");
    AttentionWeights probe = weights;
    const count_t d = weights.dim();
    DenseMatrix grad(d, d);
    for (count_t i = 0; i < d; ++i)
        for (count_t j = 0; j < d; ++j) {
            const double orig = probe.w(i, j);
            probe.w(i, j) = orig + epsilon;
            const double up = empirical_train_loss(probe, set);
            probe.w(i, j) = orig - epsilon;
            const double down = empirical_train_loss(probe, set);
            probe.w(i, j) = orig;
            grad(i, j) = (up - down) / (2.0 * epsilon);
        }
    return grad;
}

/// Two leading singular values via power iteration with one deflation.
inline std::pair<double, double> top_two_singular_values(const DenseMatrix& a) {
    const count_t rows = a.rows(), cols = a.cols();
    auto power_sigma = [&](const DenseMatrix& m, DenseVector& v_out, DenseVector& u_out) {
        DenseVector v(cols);
        std::uint64_t st = 0x5bd1e995u;
        for (count_t j = 0; j < cols; ++j) {
            st ^= st << 13;
            st ^= st >> 7;
            st ^= st << 17;
            v[j] = static_cast<double>(st % 1000) / 1000.0 + 0.5;
        }
        double sigma = 0.0;
        for (int it = 0; it < 200; ++it) {
            DenseVector u = matvec(m, v);
            const double un = norm2(u);
            if (un == 0.0) {
                v_out = v;
                u_out.assign(rows, 0.0);
                return 0.0;
            }
            for (auto& x : u) x /= un;
            DenseVector w = matvec_transposed(m, u);
            const double wn = norm2(w);
            if (wn == 0.0) {
                v_out = v;
                u_out = u;
                return 0.0;
            }
            for (count_t j = 0; j < cols; ++j) v[j] = w[j] / wn;
            sigma = wn;
            u_out = u;
        }
        v_out = v;
        return sigma;
    };
    DenseVector v1, u1;
    const double s1 = power_sigma(a, v1, u1);
    if (s1 == 0.0) return {0.0, 0.0};
    DenseMatrix deflated = a;
    for (count_t i = 0; i < rows; ++i)
        for (count_t j = 0; j < cols; ++j) deflated(i, j) -= s1 * u1[i] * v1[j];
    DenseVector v2, u2;
    const double s2 = power_sigma(deflated, v2, u2);
    return {s1, s2};
}

}  // namespace ttlab

#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "ttlab/config.hpp"
#include "ttlab/core.hpp"
#include "ttlab/montecarlo.hpp"
#include "ttlab/theory.hpp"

namespace ttlab {

/// One row of a sweep: the independent variable, the theory prediction,
/// and the Monte-Carlo estimate, plus the exact configuration it came from.
struct SweepRecord {
    std::string sweep_var;
    double value = 0.0;
    double loss_theory = 0.0;
    double loss_mc_mean = 0.0;
    double loss_mc_stderr = 0.0;
    std::string init;
    count_t n = 0, d = 0, k = 0;
    double sigma = 0.0;
    std::uint64_t seed = 0;
};

inline constexpr const char* kSweepCsvHeader =
    "sweep_var,value,loss_theory,loss_mc_mean,loss_mc_stderr,init,n,d,k,sigma,seed";

namespace detail {

inline std::string format_g17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline count_t scaled_dim(double nominal, double scale) {
    const double x = std::round(nominal * scale);
    return static_cast<count_t>(std::max(8.0, x));
}

}  // namespace detail

inline std::string to_csv(const std::vector<SweepRecord>& records) {
    std::string out = kSweepCsvHeader;
    out += '\n';
    for (const SweepRecord& r : records) {
        out += r.sweep_var;
        out += ',';
        out += detail::format_g17(r.value);
        out += ',';
        out += detail::format_g17(r.loss_theory);
        out += ',';
        out += detail::format_g17(r.loss_mc_mean);
        out += ',';
        out += detail::format_g17(r.loss_mc_stderr);
        out += ',';
        out += r.init;
        out += ',';
        out += std::to_string(r.n);
        out += ',';
        out += std::to_string(r.d);
        out += ',';
        out += std::to_string(r.k);
        out += ',';
        out += detail::format_g17(r.sigma);
        out += ',';
        out += std::to_string(r.seed);
        out += '\n';
    }
    return out;
}

enum class FigureId { fig1a, fig1b, fig2a, fig2b, fig2c };

inline FigureId parse_figure_id(const std::string& s) {
    if (s == "fig1a") return FigureId::fig1a;
    if (s == "fig1b") return FigureId::fig1b;
    if (s == "fig2a") return FigureId::fig2a;
    if (s == "fig2b") return FigureId::fig2b;
    if (s == "fig2c") return FigureId::fig2c;
    throw ParseError("unknown figure id '" + s + "' (expected fig1a|fig1b|fig2a|fig2b|fig2c)");
}

struct FigureOptions {
    double scale = 1.0;
    count_t trials = 2000;
    std::uint64_t seed = 0;
    unsigned threads = 0;
};

namespace detail {

inline SweepRecord run_point(const TrialConfig& cfg, const std::string& sweep_var, double value,
                             const std::string& init_name, double theory_final,
                             unsigned threads) {
    const MCEstimate est = estimate_ttt_loss(cfg, threads);
    SweepRecord r;
    r.sweep_var = sweep_var;
    r.value = value;
    r.loss_theory = theory_final;
    r.loss_mc_mean = est.mean;
    r.loss_mc_stderr = est.std_error;
    r.init = init_name;
    r.n = cfg.n;
    r.d = cfg.d;
    r.k = cfg.k;
    r.sigma = cfg.task.sigma;
    r.seed = cfg.base_seed;
    return r;
}

inline std::vector<count_t> k_grid(count_t k_max, count_t points) {
    std::vector<count_t> ks(points);
    for (count_t i = 0; i < points; ++i)
        ks[i] = static_cast<count_t>(
            std::round(static_cast<double>(i) * static_cast<double>(k_max) /
                       static_cast<double>(points - 1)));
    return ks;
}

}  // namespace detail

/// Loss after TTT vs alpha = n/d for gamma in {1, 2, 100}; n is fixed and
/// d = n/alpha. Isotropic covariances, beta = 1_d, optimally tuned step.
inline std::vector<SweepRecord> run_fig1a(const FigureOptions& opt) {
    std::vector<SweepRecord> out;
    const count_t n = detail::scaled_dim(300, opt.scale);
    const double gammas[] = {1.0, 2.0, 100.0};
    std::uint64_t idx = 0;
    for (double gamma : gammas) {
        for (int step = 1; step <= 40; ++step) {
            const double alpha = 0.1 * step;
            const count_t d = static_cast<count_t>(
                std::max(8.0, std::round(static_cast<double>(n) / alpha)));
            const count_t k = static_cast<count_t>(std::round(gamma * static_cast<double>(d)));
            TrialConfig cfg;
            cfg.cov = CovarianceModel::isotropic(d);
            cfg.task = TaskInstance{DenseVector(d, 1.0), 0.0};
            cfg.n = n;
            cfg.d = d;
            cfg.k = k;
            cfg.init = InitKind::pretrained;
            cfg.eta_policy = EtaPolicyKind::theory_iso;
            cfg.trials = opt.trials;
            cfg.base_seed = detail::mix_seed(opt.seed, idx++);
            const double theory =
                predict_iso_pretrained(n, d, k, static_cast<double>(d)).predicted_final_loss;
            char label[48];
            std::snprintf(label, sizeof(label), "pretrained(gamma=%g)", gamma);
            out.push_back(detail::run_point(cfg, "alpha", alpha, label, theory, opt.threads));
        }
    }
    return out;
}

/// Loss after TTT vs gamma = k/d for the pre-trained and the zero start.
inline std::vector<SweepRecord> run_fig1b(const FigureOptions& opt) {
    std::vector<SweepRecord> out;
    const count_t n = detail::scaled_dim(200, opt.scale);
    const count_t d = detail::scaled_dim(400, opt.scale);
    const double b2 = static_cast<double>(d);
    std::uint64_t idx = 0;
    for (count_t k : detail::k_grid(4 * n, 21)) {
        TrialConfig cfg;
        cfg.cov = CovarianceModel::isotropic(d);
        cfg.task = TaskInstance{DenseVector(d, 1.0), 0.0};
        cfg.n = n;
        cfg.d = d;
        cfg.k = k;
        cfg.trials = opt.trials;
        const double gamma = static_cast<double>(k) / static_cast<double>(d);

        cfg.init = InitKind::pretrained;
        cfg.eta_policy = EtaPolicyKind::theory_iso;
        cfg.base_seed = detail::mix_seed(opt.seed, idx++);
        out.push_back(detail::run_point(cfg, "gamma", gamma, "pretrained",
                                        predict_iso_pretrained(n, d, k, b2).predicted_final_loss,
                                        opt.threads));

        cfg.init = InitKind::zero;
        cfg.eta_policy = EtaPolicyKind::theory_zero;
        cfg.base_seed = detail::mix_seed(opt.seed, idx++);
        out.push_back(detail::run_point(cfg, "gamma", gamma, "zero",
                                        predict_zero_init(n, d, k, b2, 0.0).predicted_final_loss,
                                        opt.threads));
    }
    return out;
}

namespace detail {

inline std::vector<SweepRecord> run_alignment_figure(const FigureOptions& opt, count_t n,
                                                     count_t d, const DenseVector& task_eigs_a,
                                                     const DenseVector& task_eigs_b,
                                                     const DenseVector& beta,
                                                     const std::string& label_a,
                                                     const std::string& label_b) {
    std::vector<SweepRecord> out;
    std::uint64_t idx = 0;
    const CovarianceModel cov_a = CovarianceModel::diagonal(DenseVector(d, 1.0), task_eigs_a);
    const CovarianceModel cov_b = CovarianceModel::diagonal(DenseVector(d, 1.0), task_eigs_b);
    struct Curve {
        const CovarianceModel* cov;
        InitKind init;
        std::string label;
    };
    const Curve curves[] = {{&cov_a, InitKind::pretrained, label_a},
                            {&cov_b, InitKind::pretrained, label_b},
                            {&cov_a, InitKind::zero, "zero"}};
    for (count_t k : k_grid(4 * n, 21)) {
        const double gamma = static_cast<double>(k) / static_cast<double>(d);
        for (const Curve& c : curves) {
            TrialConfig cfg;
            cfg.cov = *c.cov;
            cfg.task = TaskInstance{beta, 0.0};
            cfg.n = n;
            cfg.d = d;
            cfg.k = k;
            cfg.init = c.init;
            cfg.eta_policy = EtaPolicyKind::theory_general;
            cfg.trials = opt.trials;
            cfg.base_seed = mix_seed(opt.seed, idx++);
            const AttentionWeights w0 = resolve_initial_weights(cfg);
            const double theory =
                predict_general_cov(w0, cfg.cov, cfg.task, n, d, k).predicted_final_loss;
            out.push_back(run_point(cfg, "gamma", gamma, c.label, theory, opt.threads));
        }
    }
    return out;
}

}  // namespace detail

/// Loss after TTT vs gamma for two graded task covariances and the zero
/// start. The written setting uses d = 600 with 250-wide blocks, which do
/// not fit together; the 250-wide blocks fix d = 500 here.
inline std::vector<SweepRecord> run_fig2a(const FigureOptions& opt) {
    const count_t n = detail::scaled_dim(300, opt.scale);
    const count_t half = detail::scaled_dim(250, opt.scale);
    const count_t d = 2 * half;
    DenseVector eigs_a(d, 0.5), eigs_b(d, 1.0), beta(d, 0.5);
    for (count_t i = 0; i < half; ++i) {
        eigs_a[i] = 1.0;
        eigs_b[i] = 0.5;
        beta[i] = 1.0;
    }
    return detail::run_alignment_figure(opt, n, d, eigs_a, eigs_b, beta, "pretrained_cov1",
                                        "pretrained_cov2");
}

/// Best- vs worst-aligned pretrained start against the zero start.
inline std::vector<SweepRecord> run_fig2b(const FigureOptions& opt) {
    const count_t n = detail::scaled_dim(250, opt.scale);
    const count_t d = detail::scaled_dim(500, opt.scale);
    DenseVector eigs_best(d, 0.0), eigs_worst(d, 1.0), beta(d, 0.0);
    eigs_best[0] = 1.0;
    eigs_worst[0] = 0.0;
    beta[0] = 1.0;
    return detail::run_alignment_figure(opt, n, d, eigs_best, eigs_worst, beta, "pretrained_best",
                                        "pretrained_worst");
}

/// Multi-step TTT: loss after 1..10 steps for several step-size decay
/// factors, starting from the optimal pre-trained weights.
inline std::vector<SweepRecord> run_fig2c(const FigureOptions& opt) {
    std::vector<SweepRecord> out;
    const count_t n = detail::scaled_dim(50, opt.scale);
    const count_t d = detail::scaled_dim(100, opt.scale);
    const count_t k = 50 * d;
    const double b2 = static_cast<double>(d);
    const double decays[] = {1.0, 0.75, 0.5, 0.25, 0.1};
    const double theory_single = predict_iso_pretrained(n, d, k, b2).predicted_final_loss;
    std::uint64_t idx = 0;
    for (double decay : decays) {
        TrialConfig cfg;
        cfg.cov = CovarianceModel::isotropic(d);
        cfg.task = TaskInstance{DenseVector(d, 1.0), 0.0};
        cfg.n = n;
        cfg.d = d;
        cfg.k = k;
        cfg.init = InitKind::pretrained;
        cfg.eta_policy = EtaPolicyKind::theory_iso;
        cfg.steps = 10;
        cfg.decay = decay;
        cfg.trials = opt.trials;
        cfg.base_seed = detail::mix_seed(opt.seed, idx++);
        const std::vector<MCEstimate> traj = estimate_ttt_trajectory(cfg, opt.threads);
        char label[48];
        std::snprintf(label, sizeof(label), "pretrained(decay=%g)", decay);
        for (count_t s = 0; s < traj.size(); ++s) {
            SweepRecord r;
            r.sweep_var = "steps";
            r.value = static_cast<double>(s + 1);
            r.loss_theory = theory_single;  // single-step prediction as reference line
            r.loss_mc_mean = traj[s].mean;
            r.loss_mc_stderr = traj[s].std_error;
            r.init = label;
            r.n = n;
            r.d = d;
            r.k = k;
            r.sigma = 0.0;
            r.seed = cfg.base_seed;
            out.push_back(r);
        }
    }
    return out;
}

inline std::vector<SweepRecord> run_figure(FigureId id, const FigureOptions& opt) {
    if (!(opt.scale > 0.0 && opt.scale <= 1.0))
        throw DomainError("run_figure: scale must lie in (0, 1]");
    if (opt.trials == 0) throw DomainError("run_figure: trials must be >= 1");
    switch (id) {
        case FigureId::fig1a: return run_fig1a(opt);
        case FigureId::fig1b: return run_fig1b(opt);
        case FigureId::fig2a: return run_fig2a(opt);
        case FigureId::fig2b: return run_fig2b(opt);
        default: return run_fig2c(opt);
    }
}

/// Executes the experiment described by a config file. One record per k
/// value (the optional k_values sweep), each on its own seed stream.
inline std::vector<SweepRecord> run_config_records(const ExperimentSpec& spec,
                                                   unsigned threads = 0) {
    std::vector<count_t> ks = spec.k_sweep.empty() ? std::vector<count_t>{spec.base.k}
                                                   : spec.k_sweep;
    std::vector<SweepRecord> out;
    std::uint64_t idx = 0;
    for (count_t k : ks) {
        TrialConfig cfg = spec.base;
        cfg.k = k;
        if (!spec.k_sweep.empty()) cfg.base_seed = detail::mix_seed(spec.base.base_seed, idx++);
        const AttentionWeights w0 = resolve_initial_weights(cfg);
        const double b2 = dot(cfg.task.beta, cfg.task.beta);
        double theory = 0.0;
        switch (cfg.eta_policy) {
            case EtaPolicyKind::theory_iso:
                theory = predict_iso_pretrained(cfg.n, cfg.d, cfg.k, b2).predicted_final_loss;
                break;
            case EtaPolicyKind::theory_zero:
                theory = predict_zero_init(cfg.n, cfg.d, cfg.k, b2, cfg.task.sigma)
                             .predicted_final_loss;
                break;
            case EtaPolicyKind::theory_general:
                theory =
                    predict_general_cov(w0, cfg.cov, cfg.task, cfg.n, cfg.d, cfg.k)
                        .predicted_final_loss;
                break;
            default:
                // No closed-form prediction for a manual step size; report
                // the exact pre-update loss instead.
                theory = population_loss(w0, cfg.cov, cfg.task, cfg.n).total;
                break;
        }
        out.push_back(detail::run_point(cfg, "k", static_cast<double>(cfg.k),
                                        to_string(cfg.init), theory, threads));
    }
    return out;
}

/// Theory-only report for a config (no sampling).
inline TheoryReport theory_report_for(const TrialConfig& cfg) {
    const double b2 = dot(cfg.task.beta, cfg.task.beta);
    switch (cfg.eta_policy) {
        case EtaPolicyKind::theory_iso:
            if (cfg.task.sigma != 0.0) throw RegimeError("theory_iso requires sigma = 0");
            if (!cfg.cov.fully_isotropic())
                throw RegimeError("theory_iso requires isotropic covariances");
            return predict_iso_pretrained(cfg.n, cfg.d, cfg.k, b2);
        case EtaPolicyKind::theory_zero:
            if (!cfg.cov.feature_isotropic())
                throw RegimeError("theory_zero requires Sigma_x = I");
            return predict_zero_init(cfg.n, cfg.d, cfg.k, b2, cfg.task.sigma);
        case EtaPolicyKind::theory_general:
            return predict_general_cov(resolve_initial_weights(cfg), cfg.cov, cfg.task, cfg.n,
                                       cfg.d, cfg.k);
        default:
            throw RegimeError("the theory report needs a theory_* eta policy");
    }
}

}  // namespace ttlab

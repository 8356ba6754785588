#include <gtest/gtest.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "ttlab/config.hpp"
#include "ttlab/figures.hpp"
#include "ttlab/verify.hpp"

using namespace ttlab;

namespace {

ExperimentSpec parse_text(const std::string& text) {
    std::istringstream in(text);
    return parse_experiment_stream(in, "test.cfg");
}

std::string write_temp(const std::string& name, const std::string& body) {
    const std::string path = std::string(::testing::TempDir()) + name;
    std::ofstream out(path);
    out << body;
    return path;
}

int run_cli(const std::string& args) {
    const int status = std::system((std::string(TTLAB_CLI_PATH) + " " + args).c_str());
    return WEXITSTATUS(status);
}

}  // namespace

TEST(ConfigParse, MinimalConfig) {
    const ExperimentSpec spec = parse_text("n = 64\nd = 64\nk = 64\ntrials = 100\n");
    EXPECT_EQ(spec.base.n, 64u);
    EXPECT_EQ(spec.base.d, 64u);
    EXPECT_EQ(spec.base.k, 64u);
    EXPECT_EQ(spec.base.trials, 100u);
    EXPECT_EQ(spec.base.init, InitKind::pretrained);
    EXPECT_EQ(spec.base.eta_policy, EtaPolicyKind::theory_iso);
    EXPECT_TRUE(spec.base.cov.fully_isotropic());
    EXPECT_EQ(spec.base.task.beta, DenseVector(64, 1.0));
}

TEST(ConfigParse, CommentsAndFullKeySet) {
    const ExperimentSpec spec = parse_text(
        "# experiment\n"
        "n = 8\nd = 3\nk = 4   # inline comment\n"
        "sigma = 0.25\ntrials = 10\nbase_seed = 99\n"
        "init = zero\neta_policy = theory_zero\n"
        "steps = 4\ndecay = 0.5\n"
        "feature_eigs = 1\ntask_eigs = 2,1,0\n"
        "beta = 0.5,-1,2\n");
    EXPECT_EQ(spec.base.init, InitKind::zero);
    EXPECT_EQ(spec.base.eta_policy, EtaPolicyKind::theory_zero);
    EXPECT_EQ(spec.base.steps, 4u);
    EXPECT_DOUBLE_EQ(spec.base.decay, 0.5);
    EXPECT_DOUBLE_EQ(spec.base.task.sigma, 0.25);
    EXPECT_EQ(spec.base.task.beta, (DenseVector{0.5, -1.0, 2.0}));
    EXPECT_EQ(spec.base.cov.task_eigs(), (DenseVector{2.0, 1.0, 0.0}));
}

TEST(ConfigParse, UnitBetaAndBasisSeed) {
    const ExperimentSpec spec = parse_text(
        "n = 4\nd = 5\nk = 2\ntrials = 3\nbeta = unit\nbasis_seed = 7\n"
        "feature_eigs = 2\ntask_eigs = 1\n");
    DenseVector expect(5, 0.0);
    expect[0] = 1.0;
    EXPECT_EQ(spec.base.task.beta, expect);
    EXPECT_FALSE(spec.base.cov.identity_basis());
    const DenseMatrix q = spec.base.cov.basis_q();
    EXPECT_LE(max_abs_diff(matmul(transpose(q), q), identity(5)), 1e-12);
}

TEST(ConfigParse, ErrorsCarryLineContext) {
    try {
        parse_text("n = 8\nd = oops\nk = 1\ntrials = 1\n");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("test.cfg:2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_text("n = 8\nn = 9\nd = 1\nk = 1\ntrials = 1\n"), ParseError);
    EXPECT_THROW(parse_text("n = 8\nd = 1\nk = 1\ntrials = 1\nwhat = 3\n"), ParseError);
    EXPECT_THROW(parse_text("d = 1\nk = 1\ntrials = 1\n"), ParseError);
    EXPECT_THROW(parse_text("n 8\nd = 1\nk = 1\ntrials = 1\n"), ParseError);
}

TEST(ConfigParse, KSweepList) {
    const ExperimentSpec spec =
        parse_text("n = 8\nd = 4\nk = 0\ntrials = 5\nk_values = 0,4,8\n");
    EXPECT_EQ(spec.k_sweep, (std::vector<count_t>{0, 4, 8}));
}

TEST(RunConfig, NoisyIsotropicPolicyIsRejected) {
    const ExperimentSpec spec = parse_text(
        "n = 8\nd = 4\nk = 4\ntrials = 5\nsigma = 0.5\neta_policy = theory_iso\n");
    EXPECT_THROW(run_config_records(spec), RegimeError);
}

TEST(RunConfig, MinimalConfigProducesOneRecordQuickly) {
    const ExperimentSpec spec = parse_text("n = 64\nd = 64\nk = 64\ntrials = 100\n");
    const auto start = std::chrono::steady_clock::now();
    const auto records = run_config_records(spec);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ASSERT_EQ(records.size(), 1u);
    EXPECT_EQ(records[0].sweep_var, "k");
    EXPECT_EQ(records[0].k, 64u);
    EXPECT_LT(secs, 5.0);
}

TEST(RunConfig, DeterministicOutputBytes) {
    const ExperimentSpec spec = parse_text(
        "n = 12\nd = 6\nk = 9\ntrials = 40\nbase_seed = 5\neta_policy = theory_iso\n");
    const std::string a = to_csv(run_config_records(spec, 1));
    const std::string b = to_csv(run_config_records(spec, 2));
    EXPECT_EQ(a, b);
}

TEST(SweepCsv, GoldenHeader) {
    EXPECT_STREQ(kSweepCsvHeader,
                 "sweep_var,value,loss_theory,loss_mc_mean,loss_mc_stderr,init,n,d,k,sigma,seed");
    const std::string csv = to_csv({});
    EXPECT_EQ(csv, std::string(kSweepCsvHeader) + "\n");
}

TEST(SweepCsv, SeventeenDigitRoundTrip) {
    SweepRecord r;
    r.sweep_var = "gamma";
    r.value = 0.1;
    r.loss_theory = 3.141592653589793;
    r.loss_mc_mean = 2.0 / 3.0;
    r.loss_mc_stderr = 1.2345678901234567e-7;
    r.init = "pretrained";
    r.n = 50;
    r.d = 100;
    r.k = 120;
    r.sigma = 0.0;
    r.seed = 1234567890123456789ULL;
    const std::string csv = to_csv({r});
    std::istringstream in(csv);
    std::string header, line;
    std::getline(in, header);
    std::getline(in, line);
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    ASSERT_EQ(cells.size(), 11u);
    EXPECT_EQ(std::stod(cells[1]), r.value);
    EXPECT_EQ(std::stod(cells[2]), r.loss_theory);
    EXPECT_EQ(std::stod(cells[3]), r.loss_mc_mean);
    EXPECT_EQ(std::stod(cells[4]), r.loss_mc_stderr);
    EXPECT_EQ(cells[10], "1234567890123456789");
}

TEST(RunFigure, Fig1bSmokeAndScaleHonesty) {
    FigureOptions opt;
    opt.scale = 0.04;
    opt.trials = 30;
    opt.seed = 3;
    const auto records = run_figure(FigureId::fig1b, opt);
    ASSERT_EQ(records.size(), 42u);  // 21 sweep points x 2 inits
    for (const auto& r : records) {
        EXPECT_EQ(r.sweep_var, "gamma");
        EXPECT_EQ(r.n, 8u);    // 200 * 0.04 = 8
        EXPECT_EQ(r.d, 16u);   // 400 * 0.04 = 16
        EXPECT_LE(r.k, 4 * r.n);
        EXPECT_GE(r.loss_mc_mean, 0.0);
        EXPECT_GE(r.loss_mc_stderr, 0.0);
        EXPECT_GE(r.loss_theory, 0.0);
        EXPECT_DOUBLE_EQ(r.value, static_cast<double>(r.k) / static_cast<double>(r.d));
        EXPECT_TRUE(r.init == "pretrained" || r.init == "zero");
    }
    // k = 0 points degenerate to the exact initial loss.
    EXPECT_DOUBLE_EQ(records[0].loss_mc_stderr, 0.0);
    EXPECT_DOUBLE_EQ(records[0].loss_mc_mean, records[0].loss_theory);
}

TEST(RunFigure, RejectsBadScale) {
    FigureOptions opt;
    opt.scale = 0.0;
    EXPECT_THROW(run_figure(FigureId::fig1a, opt), DomainError);
    opt.scale = 1.5;
    EXPECT_THROW(run_figure(FigureId::fig1a, opt), DomainError);
}

TEST(RunFigure, Fig2cSingleStepCapturesMostOfTheReduction) {
    // At the written figure setting the first optimally sized step takes
    // at least 80% of the loss reduction that ten decayed steps reach.
    FigureOptions opt;
    opt.scale = 1.0;
    opt.trials = 150;
    opt.seed = 12;
    const auto records = run_figure(FigureId::fig2c, opt);
    ASSERT_EQ(records.size(), 50u);  // 5 decays x 10 steps
    const count_t n = records[0].n, d = records[0].d;
    const double initial =
        static_cast<double>(d) * (d + 1.0) / (static_cast<double>(n) + d + 1.0);

    std::string best_curve;
    double best_final = 1e300;
    std::map<std::string, std::map<int, double>> curves;
    for (const auto& r : records) curves[r.init][static_cast<int>(r.value)] = r.loss_mc_mean;
    for (const auto& [name, curve] : curves) {
        if (curve.at(10) < best_final) {
            best_final = curve.at(10);
            best_curve = name;
        }
    }
    const double one_step = curves.at(best_curve).at(1);
    EXPECT_GE((initial - one_step) / (initial - best_final), 0.8)
        << "best decay curve: " << best_curve;
    // Without decay the iteration is unstable and must not be the winner.
    EXPECT_NE(best_curve, "pretrained(decay=1)");
}

TEST(FigureTheoryCurves, Fig1bTheoryCrossingNearNineTenths) {
    // At the written scale (n=200, d=400) the two predicted final-loss
    // curves cross close to gamma = 9/10.
    const count_t n = 200, d = 400;
    const double b2 = static_cast<double>(d);
    auto diff = [&](count_t k) {
        return predict_iso_pretrained(n, d, k, b2).predicted_final_loss -
               predict_zero_init(n, d, k, b2, 0.0).predicted_final_loss;
    };
    count_t lo = 0, hi = 4 * n;
    ASSERT_LT(diff(lo), 0.0);
    ASSERT_GT(diff(hi), 0.0);
    while (hi - lo > 1) {
        const count_t mid = (lo + hi) / 2;
        (diff(mid) < 0.0 ? lo : hi) = mid;
    }
    const double gamma = static_cast<double>(hi) / static_cast<double>(d);
    EXPECT_NEAR(gamma, 0.9, 0.1 * 0.9);
}

TEST(FigureTheoryCurves, Fig1aTheoryArgmaxNearThreshold) {
    // gamma = 2 theory curve at the written n = 300: the argmax over the
    // 0.1-spaced alpha grid sits at the non-monotonicity threshold.
    const count_t n = 300;
    double best_alpha = 0.0, best = -1.0;
    for (int step = 1; step <= 40; ++step) {
        const double alpha = 0.1 * step;
        const count_t d =
            static_cast<count_t>(std::max(8.0, std::round(static_cast<double>(n) / alpha)));
        const count_t k = 2 * d;
        const double norm_loss =
            predict_iso_pretrained(n, d, k, static_cast<double>(d)).predicted_final_loss /
            static_cast<double>(d);
        if (norm_loss > best) {
            best = norm_loss;
            best_alpha = alpha;
        }
    }
    EXPECT_NEAR(best_alpha, nonmonotonic_threshold(2.0).value(), 0.1 + 1e-12);
}

TEST(VerifySuites, UnknownSuiteNameThrows) {
    EXPECT_THROW(run_verify("nonsense", 0), ParseError);
}

TEST(CliBinary, ExitCodesFollowTheContract) {
    const std::string good = write_temp("good.cfg", "n = 8\nd = 4\nk = 4\ntrials = 5\n");
    const std::string bad = write_temp("bad.cfg", "n = 8\nd = oops\n");
    const std::string regime = write_temp(
        "regime.cfg", "n = 8\nd = 4\nk = 4\ntrials = 5\nsigma = 0.5\neta_policy = theory_iso\n");
    const std::string out = std::string(::testing::TempDir()) + "cli_out.csv";

    EXPECT_EQ(run_cli("simulate " + good + " --out " + out), 0);
    EXPECT_EQ(run_cli("simulate " + bad + " --out " + out + " 2>/dev/null"), 1);
    EXPECT_EQ(run_cli("simulate " + regime + " --out " + out + " 2>/dev/null"), 3);
    EXPECT_EQ(run_cli("verify --suite shift >/dev/null"), 0);
    EXPECT_EQ(run_cli("gradcheck >/dev/null"), 0);
    EXPECT_EQ(run_cli("nonsense 2>/dev/null"), 1);
}

TEST(CliBinary, SimulateJsonOutput) {
    const std::string cfg = write_temp("sim_json.cfg", "n = 8\nd = 4\nk = 4\ntrials = 5\n");
    const std::string out = std::string(::testing::TempDir()) + "sim.json";
    ASSERT_EQ(run_cli("simulate " + cfg + " --format json --out " + out), 0);
    std::ifstream in(out);
    std::stringstream body;
    body << in.rdbuf();
    EXPECT_EQ(body.str().front(), '[');
    EXPECT_NE(body.str().find("\"loss_mc_mean\""), std::string::npos);
    EXPECT_NE(body.str().find("\"init\": \"pretrained\""), std::string::npos);
}

TEST(CliBinary, ExplicitInitConfig) {
    const std::string cfg = write_temp(
        "explicit.cfg",
        "n = 4\nd = 2\nk = 3\ntrials = 5\ninit = explicit\ninit_w = 0.1,0,0,0.1\n"
        "eta_policy = manual\neta = 1e-4\n");
    const std::string out = std::string(::testing::TempDir()) + "explicit.csv";
    EXPECT_EQ(run_cli("simulate " + cfg + " --out " + out), 0);
    std::ifstream in(out);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    EXPECT_NE(row.find("explicit"), std::string::npos);
}

TEST(CliBinary, TheoryReportJson) {
    const std::string cfg = write_temp("theory.cfg",
                                       "n = 50\nd = 100\nk = 120\ntrials = 1\ninit = zero\n"
                                       "eta_policy = theory_zero\n");
    const std::string out = std::string(::testing::TempDir()) + "theory.json";
    ASSERT_EQ(run_cli("theory " + cfg + " --format json --out " + out), 0);
    std::ifstream in(out);
    std::stringstream body;
    body << in.rdbuf();
    EXPECT_NE(body.str().find("\"regime\": \"zero_init\""), std::string::npos);
    EXPECT_NE(body.str().find("\"predicted_final_loss\""), std::string::npos);
}

TEST(CliBinary, FigureOutputIsByteDeterministic) {
    const std::string out1 = std::string(::testing::TempDir()) + "fig_a.csv";
    const std::string out2 = std::string(::testing::TempDir()) + "fig_b.csv";
    ASSERT_EQ(run_cli("figure fig1b --scale 0.04 --trials 20 --seed 9 --threads 1 --out " + out1),
              0);
    ASSERT_EQ(run_cli("figure fig1b --scale 0.04 --trials 20 --seed 9 --threads 2 --out " + out2),
              0);
    std::ifstream a(out1), b(out2);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    EXPECT_EQ(sa.str(), sb.str());
    EXPECT_NE(sa.str().find(kSweepCsvHeader), std::string::npos);
}

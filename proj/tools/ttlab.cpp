// Command-line front end: theory reports, config-driven simulation,
// figure sweeps, and the verification suites.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ttlab/config.hpp"
#include "ttlab/figures.hpp"
#include "ttlab/montecarlo.hpp"
#include "ttlab/verify.hpp"

namespace {

using nlohmann::json;

json record_to_json(const ttlab::SweepRecord& r) {
    return json{{"sweep_var", r.sweep_var},
                {"value", r.value},
                {"loss_theory", r.loss_theory},
                {"loss_mc_mean", r.loss_mc_mean},
                {"loss_mc_stderr", r.loss_mc_stderr},
                {"init", r.init},
                {"n", r.n},
                {"d", r.d},
                {"k", r.k},
                {"sigma", r.sigma},
                {"seed", r.seed}};
}

void write_text(const std::string& path, const std::string& body) {
    if (path.empty() || path == "-") {
        std::cout << body;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ttlab::ParseError("cannot open output file '" + path + "'");
    out << body;
    if (!out) throw ttlab::ParseError("failed to write output file '" + path + "'");
}

void write_records(const std::vector<ttlab::SweepRecord>& records, const std::string& path,
                   const std::string& format) {
    if (format == "csv") {
        write_text(path, ttlab::to_csv(records));
    } else {
        json arr = json::array();
        for (const auto& r : records) arr.push_back(record_to_json(r));
        write_text(path, arr.dump(2) + "\n");
    }
}

std::string theory_report_text(const ttlab::TheoryReport& rep) {
    char buf[320];
    std::snprintf(buf, sizeof(buf),
                  "regime                 %s\n"
                  "eta_star               %.17g\n"
                  "initial_loss           %.17g\n"
                  "predicted_improvement  %.17g\n"
                  "predicted_final_loss   %.17g\n",
                  ttlab::to_string(rep.regime), rep.eta_star, rep.initial_loss,
                  rep.predicted_improvement, rep.predicted_final_loss);
    return buf;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ttlab: single-step test-time training of linear attention on Gaussian "
                 "linear-regression tasks"};
    app.require_subcommand(1);

    std::string config_path, out_path, format = "csv", figure_name, suite = "all";
    double scale = 1.0;
    std::size_t trials = 2000;
    std::uint64_t seed = 0;
    unsigned threads = 0;
    std::size_t gradcheck_dim = 4;

    auto add_io = [&](CLI::App* cmd, bool with_format = true) {
        cmd->add_option("--out", out_path, "output path ('-' for stdout)");
        if (with_format)
            cmd->add_option("--format", format, "output format")
                ->check(CLI::IsMember({"csv", "json"}));
    };

    CLI::App* theory_cmd = app.add_subcommand("theory", "print the theory prediction for a config");
    theory_cmd->add_option("config", config_path, "experiment config file")->required();
    add_io(theory_cmd);

    CLI::App* sim_cmd = app.add_subcommand("simulate", "run the Monte-Carlo experiment in a config");
    sim_cmd->add_option("config", config_path, "experiment config file")->required();
    sim_cmd->add_option("--threads", threads, "worker threads (0 = auto)");
    CLI::Option* sim_seed = sim_cmd->add_option("--seed", seed, "override the config base_seed");
    add_io(sim_cmd);

    CLI::App* fig_cmd = app.add_subcommand("figure", "reproduce one of the sweep figures");
    fig_cmd->add_option("id", figure_name, "fig1a|fig1b|fig2a|fig2b|fig2c")->required();
    fig_cmd->add_option("--scale", scale, "dimension scale factor in (0,1]");
    fig_cmd->add_option("--trials", trials, "Monte-Carlo trials per sweep point");
    fig_cmd->add_option("--seed", seed, "base seed");
    fig_cmd->add_option("--threads", threads, "worker threads (0 = auto)");
    add_io(fig_cmd);

    CLI::App* verify_cmd = app.add_subcommand("verify", "run the closed-form verification suites");
    verify_cmd->add_option("--suite", suite, "all|moments|gradients|shift|eigs|gaussian_approx");
    verify_cmd->add_option("--seed", seed, "base seed");
    add_io(verify_cmd, false);

    CLI::App* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the TTT update");
    grad_cmd->add_option("--seed", seed, "base seed");
    grad_cmd->add_option("--dim", gradcheck_dim, "maximum weight dimension (<= 5)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (theory_cmd->parsed()) {
            const ttlab::ExperimentSpec spec = ttlab::parse_experiment_file(config_path);
            const ttlab::TheoryReport rep = ttlab::theory_report_for(spec.base);
            if (format == "json") {
                json j{{"regime", ttlab::to_string(rep.regime)},
                       {"eta_star", rep.eta_star},
                       {"initial_loss", rep.initial_loss},
                       {"predicted_improvement", rep.predicted_improvement},
                       {"predicted_final_loss", rep.predicted_final_loss}};
                write_text(out_path, j.dump(2) + "\n");
            } else {
                write_text(out_path, theory_report_text(rep));
            }
            return 0;
        }

        if (sim_cmd->parsed()) {
            ttlab::ExperimentSpec spec = ttlab::parse_experiment_file(config_path);
            if (sim_seed->count() > 0) spec.base.base_seed = seed;
            const auto records = ttlab::run_config_records(spec, threads);
            write_records(records, out_path, format);
            return 0;
        }

        if (fig_cmd->parsed()) {
            ttlab::FigureOptions opt;
            opt.scale = scale;
            opt.trials = trials;
            opt.seed = seed;
            opt.threads = threads;
            const auto records = ttlab::run_figure(ttlab::parse_figure_id(figure_name), opt);
            write_records(records, out_path, format);
            return 0;
        }

        if (verify_cmd->parsed()) {
            const auto suites = ttlab::run_verify(suite, seed);
            bool all_ok = true;
            json jsuites = json::array();
            for (const auto& s : suites) {
                json jchecks = json::array();
                for (const auto& c : s.checks) {
                    std::fprintf(stdout, "[%s] %s/%s: %s\n", c.passed ? "PASS" : "FAIL",
                                 s.suite.c_str(), c.name.c_str(), c.detail.c_str());
                    jchecks.push_back({{"name", c.name}, {"passed", c.passed},
                                       {"detail", c.detail}});
                    all_ok = all_ok && c.passed;
                }
                jsuites.push_back({{"suite", s.suite}, {"passed", s.passed()},
                                   {"checks", jchecks}});
            }
            if (!out_path.empty())
                write_text(out_path, json{{"passed", all_ok}, {"suites", jsuites}}.dump(2) + "\n");
            std::fprintf(stdout, "%s\n", all_ok ? "verification passed" : "verification FAILED");
            return all_ok ? 0 : 2;
        }

        if (grad_cmd->parsed()) {
            if (gradcheck_dim < 2 || gradcheck_dim > 5)
                throw ttlab::ParseError("gradcheck --dim must lie in [2, 5]");
            const ttlab::SuiteResult res = ttlab::verify_gradients(seed, gradcheck_dim);
            bool all_ok = true;
            for (const auto& c : res.checks) {
                std::fprintf(stdout, "[%s] %s: %s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(),
                             c.detail.c_str());
                all_ok = all_ok && c.passed;
            }
            return all_ok ? 0 : 2;
        }
    } catch (const ttlab::RegimeError& e) {
        std::fprintf(stderr, "regime mismatch: %s\n", e.what());
        return 3;
    } catch (const ttlab::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

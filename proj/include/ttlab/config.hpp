#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ttlab/core.hpp"
#include "ttlab/montecarlo.hpp"

namespace ttlab {

/// Flat key = value experiment description. `#` starts a comment, arrays
/// are comma-separated. Keys mirror TrialConfig:
///
///   n = 64               d = 64               k = 64
///   sigma = 0.0          trials = 100         base_seed = 0
///   init = pretrained    # pretrained | zero | explicit
///   eta_policy = theory_iso  # theory_iso | theory_zero | theory_general | manual
///   eta = 1e-4           # required for manual policy
///   steps = 1            decay = 1.0
///   feature_eigs = 1     # scalar broadcast or d comma-separated values
///   task_eigs = 1
///   beta = ones          # ones | unit | d comma-separated values
///   basis_seed = 7       # optional: random orthonormal basis Q
///   init_w = ...         # d*d row-major values for init = explicit
///   k_values = 0,16,32   # optional sweep over k (overrides k)
struct ExperimentSpec {
    TrialConfig base;
    std::vector<count_t> k_sweep;  // empty means single run at base.k
};

namespace detail {

inline std::string trim(const std::string& s) {
    count_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline double parse_double(const std::string& v, const std::string& ctx) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw ParseError(ctx + ": expected a number, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& ctx) {
    try {
        size_t pos = 0;
        const unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw ParseError(ctx + ": expected a nonnegative integer, got '" + v + "'");
    }
}

inline std::vector<double> parse_list(const std::string& v, const std::string& ctx) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(trim(item), ctx));
    if (out.empty()) throw ParseError(ctx + ": empty list");
    return out;
}

}  // namespace detail

inline ExperimentSpec parse_experiment_stream(std::istream& in, const std::string& source) {
    std::map<std::string, std::pair<std::string, count_t>> kv;  // key -> (value, line)
    std::string line;
    count_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(source + ":" + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ParseError(source + ":" + std::to_string(lineno) + ": empty key or value");
        if (kv.count(key))
            throw ParseError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        kv[key] = {value, lineno};
    }

    static const char* known[] = {"n",     "d",     "k",          "sigma",      "trials",
                                  "base_seed", "init", "eta_policy", "eta",        "steps",
                                  "decay", "feature_eigs", "task_eigs", "beta",   "basis_seed",
                                  "init_w", "k_values"};
    for (const auto& [key, val] : kv) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok)
            throw ParseError(source + ":" + std::to_string(val.second) + ": unknown key '" + key +
                             "'");
    }

    auto ctx = [&](const std::string& key) {
        auto it = kv.find(key);
        return source + ":" + (it == kv.end() ? "?" : std::to_string(it->second.second)) + ": " +
               key;
    };
    auto require = [&](const std::string& key) -> std::string {
        auto it = kv.find(key);
        if (it == kv.end()) throw ParseError(source + ": missing required key '" + key + "'");
        return it->second.first;
    };
    auto optional_value = [&](const std::string& key) -> std::optional<std::string> {
        auto it = kv.find(key);
        if (it == kv.end()) return std::nullopt;
        return it->second.first;
    };

    ExperimentSpec spec;
    TrialConfig& cfg = spec.base;
    cfg.n = detail::parse_u64(require("n"), ctx("n"));
    cfg.d = detail::parse_u64(require("d"), ctx("d"));
    cfg.k = detail::parse_u64(require("k"), ctx("k"));
    cfg.trials = detail::parse_u64(require("trials"), ctx("trials"));
    if (auto v = optional_value("base_seed")) cfg.base_seed = detail::parse_u64(*v, ctx("base_seed"));
    if (auto v = optional_value("steps")) cfg.steps = detail::parse_u64(*v, ctx("steps"));
    if (auto v = optional_value("decay")) cfg.decay = detail::parse_double(*v, ctx("decay"));

    double sigma = 0.0;
    if (auto v = optional_value("sigma")) sigma = detail::parse_double(*v, ctx("sigma"));

    auto broadcast = [&](const std::string& key) -> DenseVector {
        auto v = optional_value(key);
        if (!v) return DenseVector(cfg.d, 1.0);
        const std::vector<double> vals = detail::parse_list(*v, ctx(key));
        if (vals.size() == 1) return DenseVector(cfg.d, vals[0]);
        if (vals.size() != cfg.d)
            throw ParseError(ctx(key) + ": expected 1 or d = " + std::to_string(cfg.d) +
                             " values, got " + std::to_string(vals.size()));
        return vals;
    };
    const DenseVector feature_eigs = broadcast("feature_eigs");
    const DenseVector task_eigs = broadcast("task_eigs");
    if (auto v = optional_value("basis_seed")) {
        RngState rng(detail::parse_u64(*v, ctx("basis_seed")));
        cfg.cov = CovarianceModel::with_basis(random_orthonormal(rng, cfg.d), feature_eigs,
                                              task_eigs);
    } else {
        cfg.cov = CovarianceModel::diagonal(feature_eigs, task_eigs);
    }

    DenseVector beta(cfg.d, 1.0);
    if (auto v = optional_value("beta")) {
        if (*v == "ones") {
            // keep default
        } else if (*v == "unit") {
            beta.assign(cfg.d, 0.0);
            beta[0] = 1.0;
        } else {
            const std::vector<double> vals = detail::parse_list(*v, ctx("beta"));
            if (vals.size() != cfg.d)
                throw ParseError(ctx("beta") + ": expected d = " + std::to_string(cfg.d) +
                                 " values, got " + std::to_string(vals.size()));
            beta = vals;
        }
    }
    cfg.task = TaskInstance{beta, sigma};

    const std::string init = optional_value("init").value_or("pretrained");
    if (init == "pretrained")
        cfg.init = InitKind::pretrained;
    else if (init == "zero")
        cfg.init = InitKind::zero;
    else if (init == "explicit")
        cfg.init = InitKind::explicit_w;
    else
        throw ParseError(ctx("init") + ": unknown init '" + init + "'");
    if (cfg.init == InitKind::explicit_w) {
        const std::vector<double> vals = detail::parse_list(require("init_w"), ctx("init_w"));
        if (vals.size() != cfg.d * cfg.d)
            throw ParseError(ctx("init_w") + ": expected d*d values");
        DenseMatrix w(cfg.d, cfg.d);
        for (count_t i = 0; i < cfg.d; ++i)
            for (count_t j = 0; j < cfg.d; ++j) w(i, j) = vals[i * cfg.d + j];
        cfg.explicit_w = AttentionWeights{std::move(w)};
    }

    const std::string policy = optional_value("eta_policy").value_or("theory_iso");
    if (policy == "theory_iso")
        cfg.eta_policy = EtaPolicyKind::theory_iso;
    else if (policy == "theory_zero")
        cfg.eta_policy = EtaPolicyKind::theory_zero;
    else if (policy == "theory_general")
        cfg.eta_policy = EtaPolicyKind::theory_general;
    else if (policy == "manual")
        cfg.eta_policy = EtaPolicyKind::manual;
    else
        throw ParseError(ctx("eta_policy") + ": unknown policy '" + policy + "'");
    if (cfg.eta_policy == EtaPolicyKind::manual)
        cfg.manual_eta = detail::parse_double(require("eta"), ctx("eta"));

    if (auto v = optional_value("k_values")) {
        for (double x : detail::parse_list(*v, ctx("k_values"))) {
            if (x < 0.0 || x != std::floor(x))
                throw ParseError(ctx("k_values") + ": entries must be nonnegative integers");
            spec.k_sweep.push_back(static_cast<count_t>(x));
        }
    }
    return spec;
}

inline ExperimentSpec parse_experiment_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError(path + ": cannot open config file");
    return parse_experiment_stream(in, path);
}

}  // namespace ttlab

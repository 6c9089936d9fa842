#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "subuda/common.hpp"
#include "subuda/data.hpp"
#include "subuda/trainer.hpp"

namespace subuda {

using KvConfig = std::map<std::string, std::string>;

// Flat `key = value` file; '#' starts a comment. One file can carry both the
// generator and trainer sections, so key validation runs against the union.
inline KvConfig parse_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open config: " + path);
    KvConfig out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error(path + ":" + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw config_error(path + ":" + std::to_string(lineno) + ": empty key");
        if (out.count(key))
            throw config_error(path + ":" + std::to_string(lineno) + ": duplicate key " + key);
        out[key] = val;
    }
    return out;
}

namespace detail {

inline const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        // trainer
        "alpha", "beta", "mode", "kn", "epsilon", "tau", "m", "lr", "momentum", "batch",
        "epochs", "seed", "ema", "dropout", "hidden", "head_dim", "disable_omega",
        "disable_tau", "pooled_mu_st", "disable_head", "no_subtype_targets",
        // generator
        "classes", "subtypes", "dim", "sigma", "shift", "n_source", "n_target", "source_pi",
        "target_pi", "class_sep", "subtype_spread", "layout"};
    return keys;
}

inline double parse_double(const KvConfig& kv, const std::string& key, double dflt) {
    auto it = kv.find(key);
    if (it == kv.end()) return dflt;
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(it->second, &used);
    } catch (const std::exception&) {
        throw config_error("key '" + key + "': not a number: " + it->second);
    }
    if (used != it->second.size())
        throw config_error("key '" + key + "': not a number: " + it->second);
    return v;
}

inline long parse_int(const KvConfig& kv, const std::string& key, long dflt) {
    auto it = kv.find(key);
    if (it == kv.end()) return dflt;
    std::size_t used = 0;
    long v = 0;
    try {
        v = std::stol(it->second, &used);
    } catch (const std::exception&) {
        throw config_error("key '" + key + "': not an integer: " + it->second);
    }
    if (used != it->second.size())
        throw config_error("key '" + key + "': not an integer: " + it->second);
    return v;
}

inline bool parse_bool(const KvConfig& kv, const std::string& key, bool dflt) {
    auto it = kv.find(key);
    if (it == kv.end()) return dflt;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw config_error("key '" + key + "': expected true/false: " + it->second);
}

inline std::vector<double> parse_list(const std::string& key, const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw config_error("key '" + key + "': bad list entry: " + tok);
        }
    }
    if (out.empty()) throw config_error("key '" + key + "': empty list");
    return out;
}

}  // namespace detail

inline void check_known_keys(const KvConfig& kv) {
    for (const auto& [k, v] : kv) {
        bool ok = false;
        for (const auto& known : detail::known_keys())
            if (k == known) {
                ok = true;
                break;
            }
        if (!ok) throw config_error("unknown config key: " + k);
    }
}

inline TrainConfig build_train_config(const KvConfig& kv, int n_classes) {
    check_known_keys(kv);
    TrainConfig cfg;
    cfg.alpha = detail::parse_double(kv, "alpha", 1.0);
    cfg.beta = detail::parse_double(kv, "beta", 0.5);
    cfg.subgraph.epsilon = detail::parse_double(kv, "epsilon", 1.0);
    cfg.subgraph.tau = detail::parse_double(kv, "tau", 1.0);
    cfg.subgraph.m = static_cast<int>(detail::parse_int(kv, "m", 8));
    cfg.lr = detail::parse_double(kv, "lr", 1e-2);
    cfg.momentum = detail::parse_double(kv, "momentum", 0.9);
    cfg.batch = static_cast<int>(detail::parse_int(kv, "batch", 64));
    cfg.epochs = static_cast<int>(detail::parse_int(kv, "epochs", 30));
    cfg.seed = static_cast<std::uint64_t>(detail::parse_int(kv, "seed", 0));
    cfg.ema = detail::parse_double(kv, "ema", 0.9);
    cfg.encoder.dropout = detail::parse_double(kv, "dropout", 0.5);
    cfg.encoder.head_dim = static_cast<int>(detail::parse_int(kv, "head_dim", 16));
    if (auto it = kv.find("hidden"); it != kv.end()) {
        cfg.encoder.hidden.clear();
        for (double v : detail::parse_list("hidden", it->second))
            cfg.encoder.hidden.push_back(static_cast<int>(v));
    }
    cfg.disable_omega = detail::parse_bool(kv, "disable_omega", false);
    cfg.disable_tau = detail::parse_bool(kv, "disable_tau", false);
    cfg.pooled_mu_st = detail::parse_bool(kv, "pooled_mu_st", false);
    cfg.disable_head = detail::parse_bool(kv, "disable_head", false);
    cfg.no_subtype_targets = detail::parse_bool(kv, "no_subtype_targets", false);

    std::string kn = "4";
    if (auto it = kv.find("kn"); it != kv.end()) kn = it->second;
    std::string mode = kn == "auto" ? "subgraph" : "kmeans";
    if (auto it = kv.find("mode"); it != kv.end()) mode = it->second;
    if (mode == "subgraph" || kn == "auto") {
        cfg.subtype_mode = SubtypeMode::subgraph;
    } else if (mode == "kmeans") {
        cfg.subtype_mode = SubtypeMode::kmeans;
        const auto ks = detail::parse_list("kn", kn);
        for (double v : ks) cfg.kn.push_back(static_cast<int>(v));
        if (cfg.kn.size() == 1) cfg.kn.assign(n_classes, cfg.kn[0]);
        if (static_cast<int>(cfg.kn.size()) != n_classes)
            throw config_error("key 'kn': need 1 or n_classes entries");
    } else {
        throw config_error("key 'mode': expected kmeans or subgraph: " + mode);
    }
    cfg.validate(n_classes);
    return cfg;
}

// Procedural mixture layout: class centers, subtype offsets and target
// shifts are random directions drawn from the seed, with configurable
// magnitudes. Explicit per-component tables stay available through the
// SyntheticSpec type itself.
inline SyntheticSpec build_synthetic_spec(const KvConfig& kv) {
    check_known_keys(kv);
    SyntheticSpec spec;
    spec.n_classes = static_cast<int>(detail::parse_int(kv, "classes", 2));
    spec.n_subtypes = static_cast<int>(detail::parse_int(kv, "subtypes", 4));
    spec.dim = static_cast<int>(detail::parse_int(kv, "dim", 8));
    spec.n_source = static_cast<int>(detail::parse_int(kv, "n_source", 400));
    spec.n_target = static_cast<int>(detail::parse_int(kv, "n_target", 400));
    spec.seed = static_cast<std::uint64_t>(detail::parse_int(kv, "seed", 0));
    const double sigma = detail::parse_double(kv, "sigma", 1.0);
    const double shift = detail::parse_double(kv, "shift", 2.0 * sigma);
    const double class_sep = detail::parse_double(kv, "class_sep", 10.0 * sigma);
    const double spread = detail::parse_double(kv, "subtype_spread", 5.0 * sigma);

    std::string layout = "random";
    if (auto it = kv.find("layout"); it != kv.end()) layout = it->second;
    if (layout == "axis") {
        // Deterministic benchmark layout. Classes sit at +-class_sep on axis 0
        // and mirror their subtype offsets, placed on sign patterns over axes
        // 1-3. The target shift has a per-subtype component along axis 0 that
        // ranges from toward the midplane to away from it, padded in a spare
        // axis so every subtype moves by the full shift magnitude.
        if (spec.dim < 5 || spec.n_subtypes > 4 || spec.n_classes != 2)
            throw config_error(
                "key 'layout': axis needs 2 classes, <= 4 subtypes and dim >= 5");
        const double r3 = 1.0 / std::sqrt(3.0);
        const double pat[4][3] = {
            {r3, r3, r3}, {r3, -r3, -r3}, {-r3, r3, -r3}, {-r3, -r3, r3}};
        const int K = spec.n_subtypes;
        for (int n = 0; n < spec.n_classes; ++n) {
            const double sgn = n == 0 ? 1.0 : -1.0;
            for (int k = 0; k < K; ++k) {
                std::vector<double> mean(spec.dim, 0.0), delta(spec.dim, 0.0);
                mean[0] = -sgn * class_sep;
                for (int j = 0; j < 3; ++j) mean[1 + j] = sgn * spread * pat[k][j];
                const double w = K > 1 ? 0.85 - 1.4 * k / (K - 1) : 0.85;
                const double dx = shift * w;
                delta[0] = sgn * dx;
                const double pad2 = shift * shift - dx * dx;
                delta[4 + k % (spec.dim - 4)] = pad2 > 0 ? std::sqrt(pad2) : 0.0;
                spec.means.push_back(std::move(mean));
                spec.shifts.push_back(std::move(delta));
                spec.sigmas.push_back(sigma);
            }
        }
    } else if (layout != "random") {
        throw config_error("key 'layout': expected random or axis: " + layout);
    }

    Rng rng(spec.seed ^ 0x73706563ULL);
    auto unit = [&](Rng& r) {
        std::vector<double> v(spec.dim);
        double norm = 0.0;
        for (auto& x : v) {
            x = r.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm > 0 ? norm : 1.0;
        return v;
    };
    const int C = spec.n_components();
    for (int n = 0; layout == "random" && n < spec.n_classes; ++n) {
        Rng crng = rng.fork(10 + n);
        const auto cdir = unit(crng);
        for (int k = 0; k < spec.n_subtypes; ++k) {
            Rng krng = crng.fork(100 + k);
            const auto sdir = unit(krng);
            const auto ddir = unit(krng);
            std::vector<double> mean(spec.dim), delta(spec.dim);
            for (int j = 0; j < spec.dim; ++j) {
                mean[j] = class_sep * cdir[j] + spread * sdir[j];
                delta[j] = shift * ddir[j];
            }
            spec.means.push_back(std::move(mean));
            spec.shifts.push_back(std::move(delta));
            spec.sigmas.push_back(sigma);
        }
    }

    auto parse_pi = [&](const std::string& key) {
        std::vector<double> pi(C, 1.0 / C);
        auto it = kv.find(key);
        if (it != kv.end() && it->second != "uniform") {
            auto vals = detail::parse_list(key, it->second);
            if (static_cast<int>(vals.size()) == spec.n_subtypes) {
                // one per-class row replicated across classes
                double row_sum = 0.0;
                for (double v : vals) row_sum += v;
                for (int n = 0; n < spec.n_classes; ++n)
                    for (int k = 0; k < spec.n_subtypes; ++k)
                        pi[n * spec.n_subtypes + k] = vals[k] / (row_sum * spec.n_classes);
            } else if (static_cast<int>(vals.size()) == C) {
                double sum = 0.0;
                for (double v : vals) sum += v;
                for (int i = 0; i < C; ++i) pi[i] = vals[i] / sum;
            } else {
                throw config_error("key '" + key + "': need subtypes or classes*subtypes entries");
            }
        }
        return pi;
    };
    spec.source_pi = parse_pi("source_pi");
    spec.target_pi = parse_pi("target_pi");
    spec.validate();
    return spec;
}

}  // namespace subuda

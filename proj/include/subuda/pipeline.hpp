#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "subuda/checkpoint.hpp"
#include "subuda/config.hpp"
#include "subuda/data.hpp"
#include "subuda/eval.hpp"
#include "subuda/trainer.hpp"

namespace subuda {

inline constexpr const char* kToolVersion = "0.1.0";

inline std::string fnv1a_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open: " + path);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    char c;
    while (f.get(c)) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void write_manifest(const std::string& out_dir, const KvConfig& config,
                           std::uint64_t seed, const std::string& dataset_path,
                           const std::vector<std::string>& outputs) {
    nlohmann::json j;
    j["tool_version"] = kToolVersion;
    j["seed"] = seed;
    j["config"] = config;
    if (!dataset_path.empty()) {
        j["dataset"] = dataset_path;
        j["dataset_fingerprint"] = fnv1a_file(dataset_path);
    }
    j["outputs"] = outputs;
    std::ofstream f(out_dir + "/manifest.json");
    if (!f) throw data_error("cannot write manifest in " + out_dir);
    f << j.dump(1) << "\n";
}

inline std::string run_generate(const KvConfig& kv, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const auto spec = build_synthetic_spec(kv);
    const auto ds = generate_synthetic(spec);
    const std::string path = out_dir + "/dataset.csv";
    save_csv(ds, path);
    write_manifest(out_dir, kv, spec.seed, path, {"dataset.csv"});
    return path;
}

struct EvalReport {
    double acc = std::numeric_limits<double>::quiet_NaN();
    double auc_value = std::numeric_limits<double>::quiet_NaN();
    double a_dist = std::numeric_limits<double>::quiet_NaN();
};

inline EvalReport evaluate_model(Encoder& encoder, const CentroidBank& bank, Dataset& ds,
                                 std::uint64_t seed) {
    const auto idx_s = ds.indices(Domain::source);
    const auto idx_t = ds.indices(Domain::target);
    if (idx_t.empty()) throw data_error("evaluate: no target samples");
    const Mat xt = feature_matrix(ds, idx_t);
    const auto pred = predict(encoder, bank, xt);
    EvalReport rep;
    std::vector<int> truth, preds;
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < idx_t.size(); ++i) {
        ds.samples[idx_t[i]].pseudo_class = pred.labels[i];
        const auto& lab = ds.samples[idx_t[i]].class_label;
        if (!lab) continue;
        truth.push_back(*lab);
        preds.push_back(pred.labels[i]);
        if (ds.n_classes == 2) (*lab == 1 ? pos : neg).push_back(pred.probs(i, 1));
    }
    if (!truth.empty()) rep.acc = accuracy(preds, truth);
    if (!pos.empty() && !neg.empty()) rep.auc_value = auc(pos, neg);
    if (!idx_s.empty()) {
        const Mat fs = encoder.forward(feature_matrix(ds, idx_s), Mode::eval, nullptr);
        const Mat ft = encoder.forward(xt, Mode::eval, nullptr);
        if (fs.rows() >= 10 && ft.rows() >= 10)
            rep.a_dist = proxy_a_distance(fs, ft, seed ^ 0xE7A1ULL);
    }
    return rep;
}

inline void write_summary(const std::string& out_dir, const EvalReport& rep,
                          const std::vector<MetricRow>& history) {
    nlohmann::json j;
    j["acc"] = rep.acc;
    j["auc"] = rep.auc_value;
    j["a_dist"] = rep.a_dist;
    if (!history.empty()) {
        const auto& last = history.back();
        j["final_epoch"] = last.epoch;
        j["loss_total"] = last.loss_total;
        j["loss_ce"] = last.loss_ce;
        j["loss_class"] = last.loss_class;
        j["loss_sub"] = last.loss_sub;
    }
    std::ofstream f(out_dir + "/summary.json");
    f << j.dump(1) << "\n";
}

inline FitResult run_train(const KvConfig& kv, const std::string& dataset_path,
                           const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    Dataset ds = load_csv(dataset_path);
    TrainConfig cfg = build_train_config(kv, ds.n_classes);
    FitResult fitres = fit(ds, cfg);
    write_metrics_csv(fitres.history, ds.n_classes, out_dir + "/metrics.csv");
    save_checkpoint(fitres.encoder, fitres.bank, out_dir + "/checkpoint.json");
    const auto rep = evaluate_model(fitres.encoder, fitres.bank, ds, cfg.seed);
    write_summary(out_dir, rep, fitres.history);
    write_manifest(out_dir, kv, cfg.seed, dataset_path,
                   {"metrics.csv", "checkpoint.json", "summary.json"});
    return fitres;
}

inline void write_projection_csv(Encoder& encoder, const CentroidBank& bank, const Dataset& ds,
                                 const std::string& path) {
    std::vector<std::size_t> all(ds.samples.size());
    std::iota(all.begin(), all.end(), 0);
    const Mat feats = encoder.forward(feature_matrix(ds, all), Mode::eval, nullptr);
    const Mat xy = project_2d(feats);
    const auto pred = predict(encoder, bank, feature_matrix(ds, all));
    std::ofstream f(path);
    if (!f) throw data_error("cannot open for writing: " + path);
    f << "x,y,domain,class,subtype,pseudo_class\n";
    char buf[40];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return std::string(buf);
    };
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        f << fmt(xy(i, 0)) << ',' << fmt(xy(i, 1)) << ','
          << (s.domain == Domain::source ? 's' : 't') << ','
          << (s.class_label ? *s.class_label : -1) << ','
          << (s.subtype_label ? *s.subtype_label : -1) << ',' << pred.labels[i] << "\n";
    }
}

inline EvalReport run_eval(const std::string& checkpoint_path, const std::string& dataset_path,
                           const std::string& out_dir, std::uint64_t seed) {
    std::filesystem::create_directories(out_dir);
    auto [encoder, bank] = load_checkpoint(checkpoint_path);
    Dataset ds = load_csv(dataset_path);
    if (ds.input_dim != encoder.config().input_dim)
        throw data_error("eval: dataset dimension does not match checkpoint");
    const auto rep = evaluate_model(encoder, bank, ds, seed);
    write_summary(out_dir, rep, {});
    write_projection_csv(encoder, bank, ds, out_dir + "/projection.csv");
    write_manifest(out_dir, {}, seed, dataset_path, {"summary.json", "projection.csv"});
    return rep;
}

// Sensitivity sweep: re-train per value of kn, m, or tau and record the
// final target metrics per value.
inline std::vector<EvalReport> run_scan(KvConfig kv, const std::string& dataset_path,
                                        const std::string& target,
                                        const std::vector<double>& values,
                                        const std::string& out_dir) {
    if (target != "kn" && target != "m" && target != "tau")
        throw config_error("scan target must be one of kn, m, tau");
    std::filesystem::create_directories(out_dir);
    Dataset base = load_csv(dataset_path);

    std::ofstream csv(out_dir + "/scan_" + target + ".csv");
    if (!csv) throw data_error("cannot write scan csv in " + out_dir);
    csv << "value,acc,auc,a_dist,loss_total,loss_ce,loss_class,loss_sub\n";
    char buf[40];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return std::string(buf);
    };

    std::vector<EvalReport> reports;
    for (double v : values) {
        KvConfig k2 = kv;
        if (target == "kn") {
            // a per-class kn list in the base config pins the other classes:
            // only the first class's K is swept
            std::string rest;
            if (auto it = kv.find("kn"); it != kv.end())
                if (auto pos = it->second.find(','); pos != std::string::npos)
                    rest = it->second.substr(pos);
            k2["kn"] = std::to_string(static_cast<int>(v)) + rest;
            k2["mode"] = "kmeans";
        } else {
            k2["mode"] = "subgraph";
            if (target == "m")
                k2["m"] = std::to_string(static_cast<int>(v));
            else
                k2[target] = fmt(v);
        }
        Dataset ds = base;
        TrainConfig cfg = build_train_config(k2, ds.n_classes);
        FitResult fr = fit(ds, cfg);
        const auto rep = evaluate_model(fr.encoder, fr.bank, ds, cfg.seed);
        const auto& last = fr.history.empty() ? MetricRow{} : fr.history.back();
        csv << fmt(v) << ',' << fmt(rep.acc) << ',' << fmt(rep.auc_value) << ','
            << fmt(rep.a_dist) << ',' << fmt(last.loss_total) << ',' << fmt(last.loss_ce) << ','
            << fmt(last.loss_class) << ',' << fmt(last.loss_sub) << "\n";
        reports.push_back(rep);
    }
    write_manifest(out_dir, kv, detail::parse_int(kv, "seed", 0), dataset_path,
                   {"scan_" + target + ".csv"});
    return reports;
}

}  // namespace subuda

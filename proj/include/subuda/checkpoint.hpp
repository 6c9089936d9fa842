#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "subuda/common.hpp"
#include "subuda/encoder.hpp"
#include "subuda/prototypes.hpp"

namespace subuda {

// Single-file JSON checkpoint: encoder config, a manifest of tensor names
// and shapes, the tensor payloads, and the centroid bank. Loading validates
// every shape against the freshly constructed encoder.

inline nlohmann::json mat_to_json(const Mat& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Mat mat_from_json(const nlohmann::json& j) {
    if (j.empty()) return Mat();
    Mat m(j.size(), j[0].size());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j2 = 0; j2 < m.cols(); ++j2) m(i, j2) = j[i][j2].get<double>();
    return m;
}

inline void save_checkpoint(Encoder& encoder, const CentroidBank& bank,
                            const std::string& path) {
    nlohmann::json j;
    j["format"] = "subuda-checkpoint-v1";
    const auto& cfg = encoder.config();
    j["encoder"]["config"] = {{"input_dim", cfg.input_dim}, {"hidden", cfg.hidden},
                              {"head_dim", cfg.head_dim},   {"use_head", cfg.use_head},
                              {"dropout", cfg.dropout},     {"bn_momentum", cfg.bn_momentum}};
    nlohmann::json manifest = nlohmann::json::array();
    nlohmann::json tensors;
    auto dump = [&](const std::vector<ParamRef>& refs) {
        for (const auto& r : refs) {
            manifest.push_back({{"name", r.name}, {"shape", r.shape}});
            tensors[r.name] = *r.data;
        }
    };
    dump(encoder.params());
    dump(encoder.state_tensors());
    j["encoder"]["manifest"] = std::move(manifest);
    j["encoder"]["tensors"] = std::move(tensors);
    j["bank"] = {{"ema", bank.ema_momentum},
                 {"c_s", mat_to_json(bank.c_s)},
                 {"c_t", mat_to_json(bank.c_t)},
                 {"init_s", std::vector<int>(bank.init_s.begin(), bank.init_s.end())},
                 {"init_t", std::vector<int>(bank.init_t.begin(), bank.init_t.end())}};
    std::ofstream f(path);
    if (!f) throw data_error("cannot open for writing: " + path);
    f << j.dump(1) << "\n";
}

inline std::pair<Encoder, CentroidBank> load_checkpoint(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw data_error(std::string("checkpoint parse failure: ") + e.what());
    }
    if (j.value("format", "") != "subuda-checkpoint-v1")
        throw data_error("checkpoint: unknown format tag");

    EncoderConfig cfg;
    const auto& jc = j["encoder"]["config"];
    cfg.input_dim = jc["input_dim"].get<int>();
    cfg.hidden = jc["hidden"].get<std::vector<int>>();
    cfg.head_dim = jc["head_dim"].get<int>();
    cfg.use_head = jc["use_head"].get<bool>();
    cfg.dropout = jc["dropout"].get<double>();
    cfg.bn_momentum = jc["bn_momentum"].get<double>();
    Encoder encoder(cfg, 0);

    const auto& tensors = j["encoder"]["tensors"];
    auto restore = [&](const std::vector<ParamRef>& refs) {
        for (const auto& r : refs) {
            if (!tensors.contains(r.name))
                throw data_error("checkpoint: missing tensor " + r.name);
            const auto v = tensors[r.name].get<std::vector<double>>();
            if (v.size() != r.data->size())
                throw data_error("checkpoint: shape mismatch for " + r.name);
            *r.data = v;
        }
    };
    restore(encoder.params());
    restore(encoder.state_tensors());

    const auto& jb = j["bank"];
    CentroidBank bank;
    bank.ema_momentum = jb["ema"].get<double>();
    bank.c_s = mat_from_json(jb["c_s"]);
    bank.c_t = mat_from_json(jb["c_t"]);
    for (int v : jb["init_s"].get<std::vector<int>>()) bank.init_s.push_back(v != 0);
    for (int v : jb["init_t"].get<std::vector<int>>()) bank.init_t.push_back(v != 0);
    if (bank.c_s.rows() != bank.init_s.size() || !bank.c_s.same_shape(bank.c_t))
        throw data_error("checkpoint: inconsistent centroid bank");
    return {std::move(encoder), std::move(bank)};
}

}  // namespace subuda

#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "subuda/common.hpp"
#include "subuda/rng.hpp"

namespace subuda {

struct Sample {
    Domain domain = Domain::source;
    std::vector<double> features;
    std::optional<int> class_label;
    std::optional<int> subtype_label;  // evaluation only, never read by training
    std::optional<int> pseudo_class;
    std::optional<int> pseudo_subtype;

    bool operator==(const Sample& o) const {
        return domain == o.domain && features == o.features && class_label == o.class_label &&
               subtype_label == o.subtype_label && pseudo_class == o.pseudo_class &&
               pseudo_subtype == o.pseudo_subtype;
    }
};

struct Dataset {
    std::vector<Sample> samples;
    int n_classes = 0;
    int input_dim = 0;

    bool operator==(const Dataset& o) const {
        return samples == o.samples && n_classes == o.n_classes && input_dim == o.input_dim;
    }

    std::vector<std::size_t> indices(Domain d) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].domain == d) out.push_back(i);
        return out;
    }
};

// Per-(class, subtype) Gaussian mixture with independent source/target
// proportion tables; target means are source means plus a per-component shift.
struct SyntheticSpec {
    int n_classes = 0;
    int n_subtypes = 0;  // same K for every class
    int dim = 0;
    std::vector<std::vector<double>> means;    // [class*K + k] -> length dim
    std::vector<std::vector<double>> shifts;   // target mean = mean + shift
    std::vector<double> sigmas;                // isotropic std per component
    std::vector<double> source_pi;             // over (class, subtype), sums to 1
    std::vector<double> target_pi;
    int n_source = 0;
    int n_target = 0;
    std::uint64_t seed = 0;

    int n_components() const { return n_classes * n_subtypes; }

    void validate() const {
        if (n_classes < 1 || n_subtypes < 1 || dim < 1)
            throw config_error("synthetic spec: classes, subtypes, dim must be >= 1");
        const std::size_t c = static_cast<std::size_t>(n_components());
        if (means.size() != c || shifts.size() != c || sigmas.size() != c ||
            source_pi.size() != c || target_pi.size() != c)
            throw config_error("synthetic spec: component table sizes inconsistent");
        for (const auto& m : means)
            if (m.size() != static_cast<std::size_t>(dim))
                throw config_error("synthetic spec: mean dimension mismatch");
        for (const auto& s : shifts)
            if (s.size() != static_cast<std::size_t>(dim))
                throw config_error("synthetic spec: shift dimension mismatch");
        for (double s : sigmas)
            if (!(s > 0.0)) throw config_error("synthetic spec: sigma must be positive");
        double ss = 0.0, st = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            if (source_pi[i] < 0.0 || target_pi[i] < 0.0)
                throw config_error("synthetic spec: negative proportion");
            ss += source_pi[i];
            st += target_pi[i];
        }
        if (std::fabs(ss - 1.0) > 1e-9 || std::fabs(st - 1.0) > 1e-9)
            throw config_error("synthetic spec: proportions must sum to 1");
    }
};

namespace detail {

inline int draw_component(Rng& rng, const std::vector<double>& pi) {
    const double u = rng.uniform();
    double acc = 0.0;
    int last_positive = 0;
    for (std::size_t i = 0; i < pi.size(); ++i) {
        if (pi[i] > 0.0) last_positive = static_cast<int>(i);
        acc += pi[i];
        if (u < acc) return static_cast<int>(i);
    }
    return last_positive;  // guard against rounding at u ~ 1
}

}  // namespace detail

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.n_classes = spec.n_classes;
    ds.input_dim = spec.dim;
    ds.samples.reserve(static_cast<std::size_t>(spec.n_source + spec.n_target));

    Rng master(spec.seed);
    Rng rng_s = master.fork(1);
    Rng rng_t = master.fork(2);

    auto emit = [&](Domain dom, Rng& rng, const std::vector<double>& pi, int count) {
        for (int i = 0; i < count; ++i) {
            const int comp = detail::draw_component(rng, pi);
            const int cls = comp / spec.n_subtypes;
            const int sub = comp % spec.n_subtypes;
            Sample s;
            s.domain = dom;
            s.class_label = cls;
            s.subtype_label = sub;
            s.features.resize(spec.dim);
            const double sigma = spec.sigmas[comp];
            for (int d = 0; d < spec.dim; ++d) {
                double mu = spec.means[comp][d];
                if (dom == Domain::target) mu += spec.shifts[comp][d];
                s.features[d] = mu + sigma * rng.normal();
            }
            ds.samples.push_back(std::move(s));
        }
    };
    emit(Domain::source, rng_s, spec.source_pi, spec.n_source);
    emit(Domain::target, rng_t, spec.target_pi, spec.n_target);
    return ds;
}

// ---------------------------------------------------------------------------
// CSV schema: domain,class,subtype,f0,...,f{D-1}; domain in {s,t}; -1 means
// "label absent". Doubles are written with enough digits to round-trip.

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail

inline void save_csv(const Dataset& ds, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw data_error("cannot open for writing: " + path);
    f << "domain,class,subtype";
    for (int d = 0; d < ds.input_dim; ++d) f << ",f" << d;
    f << "\n";
    for (const auto& s : ds.samples) {
        f << (s.domain == Domain::source ? 's' : 't');
        f << ',' << (s.class_label ? *s.class_label : -1);
        f << ',' << (s.subtype_label ? *s.subtype_label : -1);
        for (double v : s.features) f << ',' << detail::fmt_double(v);
        f << "\n";
    }
    if (!f) throw data_error("write failed: " + path);
}

inline Dataset load_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw data_error(path + ": row 0: empty file");
    auto header = detail::split_csv_line(line);
    if (header.size() < 4 || header[0] != "domain" || header[1] != "class" ||
        header[2] != "subtype")
        throw data_error(path + ": row 0: header mismatch");
    const int dim = static_cast<int>(header.size()) - 3;
    for (int d = 0; d < dim; ++d)
        if (header[3 + d] != "f" + std::to_string(d))
            throw data_error(path + ": row 0: header mismatch");

    Dataset ds;
    ds.input_dim = dim;
    int max_class = -1;
    std::size_t row = 0;
    while (std::getline(f, line)) {
        ++row;
        if (line.empty()) continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw data_error(path + ": row " + std::to_string(row) + ": ragged row");
        Sample s;
        if (cells[0] == "s")
            s.domain = Domain::source;
        else if (cells[0] == "t")
            s.domain = Domain::target;
        else
            throw data_error(path + ": row " + std::to_string(row) + ": bad domain tag");
        try {
            const int cls = std::stoi(cells[1]);
            const int sub = std::stoi(cells[2]);
            if (cls >= 0) s.class_label = cls;
            if (sub >= 0) s.subtype_label = sub;
            s.features.resize(dim);
            for (int d = 0; d < dim; ++d) {
                std::size_t used = 0;
                s.features[d] = std::stod(cells[3 + d], &used);
                if (used != cells[3 + d].size())
                    throw data_error(path + ": row " + std::to_string(row) +
                                     ": non-numeric feature");
            }
        } catch (const data_error&) {
            throw;
        } catch (const std::exception&) {
            throw data_error(path + ": row " + std::to_string(row) + ": non-numeric value");
        }
        if (s.domain == Domain::source && !s.class_label)
            throw data_error(path + ": row " + std::to_string(row) +
                             ": source sample without class label");
        if (s.class_label) max_class = std::max(max_class, *s.class_label);
        ds.samples.push_back(std::move(s));
    }
    ds.n_classes = max_class + 1;
    return ds;
}

// Feature matrix over a subset of sample indices.
inline Mat feature_matrix(const Dataset& ds, const std::vector<std::size_t>& idx) {
    Mat m(idx.size(), ds.input_dim);
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (int d = 0; d < ds.input_dim; ++d) m(i, d) = ds.samples[idx[i]].features[d];
    return m;
}

}  // namespace subuda

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "subuda/common.hpp"
#include "subuda/rng.hpp"
#include "subuda/subtyping.hpp"

namespace subuda {

inline double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size() || predictions.empty())
        throw shape_error("accuracy: size mismatch or empty");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == labels[i]) ++correct;
    return static_cast<double>(correct) / predictions.size();
}

// Mann-Whitney AUC via average ranks: fraction of (pos, neg) pairs with
// pos > neg, ties counted 1/2. Exact, O(M log M).
inline double auc(const std::vector<double>& positives, const std::vector<double>& negatives) {
    if (positives.empty() || negatives.empty())
        throw numeric_error("auc: undefined for an empty score set");
    struct Entry {
        double score;
        bool pos;
    };
    std::vector<Entry> all;
    all.reserve(positives.size() + negatives.size());
    for (double s : positives) all.push_back({s, true});
    for (double s : negatives) all.push_back({s, false});
    std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
        return a.score < b.score;
    });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j < all.size() && all[j].score == all[i].score) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
        for (std::size_t k = i; k < j; ++k)
            if (all[k].pos) rank_sum_pos += avg_rank;
        i = j;
    }
    const double np = static_cast<double>(positives.size());
    const double nn = static_cast<double>(negatives.size());
    const double u = rank_sum_pos - np * (np + 1.0) / 2.0;
    return u / (np * nn);
}

// ---------------------------------------------------------------------------
// Proxy A-distance: 2(1 - 2*err) for a weak linear domain classifier,
// clamped to [0, 2]. Logistic objective, 200 full-batch gradient steps,
// L2 penalty 1e-3, on standardized features.

inline double proxy_a_distance(const Mat& features_s, const Mat& features_t,
                               std::uint64_t seed) {
    if (features_s.rows() < 10 || features_t.rows() < 10)
        throw numeric_error("proxy_a_distance: need at least 10 samples per domain");
    if (features_s.cols() != features_t.cols())
        throw shape_error("proxy_a_distance: feature dim mismatch");
    const std::size_t d = features_s.cols();
    const std::size_t n = std::min(features_s.rows(), features_t.rows());

    Rng rng(seed ^ 0x70616421ULL);
    auto pick = [&](const Mat& m, Rng r) {
        std::vector<std::size_t> idx(m.rows());
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = idx.size(); i > 1; --i)
            std::swap(idx[i - 1], idx[r.below(i)]);
        idx.resize(n);
        return idx;
    };
    const auto idx_s = pick(features_s, rng.fork(1));
    const auto idx_t = pick(features_t, rng.fork(2));

    const std::size_t n_train = n / 2;
    std::vector<const double*> train_x, test_x;
    std::vector<double> train_y, test_y;  // 0 = source, 1 = target
    for (std::size_t i = 0; i < n; ++i) {
        (i < n_train ? train_x : test_x).push_back(features_s.row(idx_s[i]));
        (i < n_train ? train_y : test_y).push_back(0.0);
        (i < n_train ? train_x : test_x).push_back(features_t.row(idx_t[i]));
        (i < n_train ? train_y : test_y).push_back(1.0);
    }

    // standardize with train statistics
    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (const double* x : train_x)
        for (std::size_t j = 0; j < d; ++j) mean[j] += x[j];
    for (auto& m : mean) m /= train_x.size();
    for (const double* x : train_x)
        for (std::size_t j = 0; j < d; ++j) sd[j] += (x[j] - mean[j]) * (x[j] - mean[j]);
    for (auto& s : sd) s = std::sqrt(s / train_x.size()) + 1e-12;

    std::vector<double> w(d, 0.0);
    double b = 0.0;
    const double lr = 0.5, l2 = 1e-3;
    std::vector<double> z(d);
    for (int step = 0; step < 200; ++step) {
        std::vector<double> gw(d, 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < train_x.size(); ++i) {
            double logit = b;
            for (std::size_t j = 0; j < d; ++j)
                logit += w[j] * (train_x[i][j] - mean[j]) / sd[j];
            const double p = 1.0 / (1.0 + std::exp(-logit));
            const double g = p - train_y[i];
            gb += g;
            for (std::size_t j = 0; j < d; ++j) gw[j] += g * (train_x[i][j] - mean[j]) / sd[j];
        }
        const double inv = 1.0 / train_x.size();
        for (std::size_t j = 0; j < d; ++j) w[j] -= lr * (gw[j] * inv + l2 * w[j]);
        b -= lr * gb * inv;
    }

    std::size_t wrong = 0;
    for (std::size_t i = 0; i < test_x.size(); ++i) {
        double logit = b;
        for (std::size_t j = 0; j < d; ++j) logit += w[j] * (test_x[i][j] - mean[j]) / sd[j];
        const int pred = logit > 0.0 ? 1 : 0;
        if (pred != static_cast<int>(test_y[i])) ++wrong;
    }
    const double err = static_cast<double>(wrong) / test_x.size();
    return std::clamp(2.0 * (1.0 - 2.0 * err), 0.0, 2.0);
}

// ---------------------------------------------------------------------------
// Consensus clustering stability scan (subsampled k-means co-clustering).

struct ConsensusResult {
    int K = 0;
    Mat consensus;  // symmetric, unit diagonal
    double area_under_cdf = 0.0;
    double delta = 0.0;  // relative change of area vs previous K
    int skipped_resamples = 0;
};

struct ConsensusScan {
    std::vector<ConsensusResult> per_k;
    int recommended_k = 0;
};

inline ConsensusScan consensus_scan(const Mat& points, const std::vector<int>& k_range,
                                    int n_resamples, double subsample_rate, std::uint64_t seed,
                                    double elbow_threshold = 0.1) {
    const std::size_t M = points.rows();
    if (k_range.empty() || n_resamples < 2)
        throw config_error("consensus_scan: need a K range and >= 2 resamples");
    for (int k : k_range)
        if (k < 2 || static_cast<std::size_t>(k) > M / 2)
            throw config_error("consensus_scan: K must lie in [2, M/2]");
    if (!(subsample_rate > 0.0 && subsample_rate <= 1.0))
        throw config_error("consensus_scan: subsample rate in (0, 1]");

    ConsensusScan scan;
    Rng master(seed ^ 0x636F6E73ULL);
    const std::size_t sub_n = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                           subsample_rate * M));
    for (std::size_t ki = 0; ki < k_range.size(); ++ki) {
        const int K = k_range[ki];
        ConsensusResult res;
        res.K = K;
        std::vector<std::vector<int>> co(M, std::vector<int>(M, 0));
        std::vector<std::vector<int>> both(M, std::vector<int>(M, 0));
        for (int r = 0; r < n_resamples; ++r) {
            Rng rr = master.fork(static_cast<std::uint64_t>(ki) * 10007 + r);
            std::vector<std::size_t> idx(M);
            std::iota(idx.begin(), idx.end(), 0);
            for (std::size_t i = M; i > 1; --i) std::swap(idx[i - 1], idx[rr.below(i)]);
            idx.resize(sub_n);
            if (sub_n < static_cast<std::size_t>(K)) {
                ++res.skipped_resamples;
                continue;
            }
            Mat sub(sub_n, points.cols());
            for (std::size_t i = 0; i < sub_n; ++i)
                for (std::size_t j = 0; j < points.cols(); ++j) sub(i, j) = points(idx[i], j);
            const auto km = kmeans(sub, K, rr.next_u64());
            for (std::size_t a = 0; a < sub_n; ++a)
                for (std::size_t b = a + 1; b < sub_n; ++b) {
                    ++both[idx[a]][idx[b]];
                    if (km.assignments[a] == km.assignments[b]) ++co[idx[a]][idx[b]];
                }
        }
        res.consensus = Mat(M, M);
        std::vector<double> entries;
        for (std::size_t a = 0; a < M; ++a) {
            res.consensus(a, a) = 1.0;
            for (std::size_t b = a + 1; b < M; ++b) {
                const double v = both[a][b] > 0
                                     ? static_cast<double>(co[a][b]) / both[a][b]
                                     : 0.0;
                res.consensus(a, b) = v;
                res.consensus(b, a) = v;
                if (both[a][b] > 0) entries.push_back(v);
            }
        }
        // area under the empirical CDF over a fixed 100-bin grid
        std::sort(entries.begin(), entries.end());
        double area = 0.0;
        const int bins = 100;
        for (int bbin = 1; bbin <= bins; ++bbin) {
            const double x = static_cast<double>(bbin) / bins;
            const auto it = std::upper_bound(entries.begin(), entries.end(), x);
            const double cdf = entries.empty()
                                   ? 0.0
                                   : static_cast<double>(it - entries.begin()) / entries.size();
            area += cdf / bins;
        }
        res.area_under_cdf = area;
        if (ki == 0)
            res.delta = area;
        else {
            const double prev = scan.per_k.back().area_under_cdf;
            res.delta = prev > 0.0 ? (area - prev) / prev : 0.0;
        }
        scan.per_k.push_back(std::move(res));
    }
    // elbow: the largest K reached before the relative gain drops below the
    // threshold
    scan.recommended_k = scan.per_k.front().K;
    for (std::size_t ki = 1; ki < scan.per_k.size(); ++ki) {
        if (scan.per_k[ki].delta < elbow_threshold) break;
        scan.recommended_k = scan.per_k[ki].K;
    }
    return scan;
}

// ---------------------------------------------------------------------------
// PCA projection onto the top-2 principal components, deterministic sign
// convention (largest-magnitude loading positive). Rank-deficient inputs
// zero-pad the missing component.

namespace detail {

// Jacobi eigendecomposition of a small symmetric matrix.
inline void jacobi_eigen(Mat a, std::vector<double>& evals, Mat& evecs) {
    const std::size_t n = a.rows();
    evecs = Mat(n, n);
    for (std::size_t i = 0; i < n; ++i) evecs(i, i) = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::fabs(a(p, q)) < 1e-30) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(i, q) = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a(p, i), aqi = a(q, i);
                    a(p, i) = c * api - s * aqi;
                    a(q, i) = s * api + c * aqi;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = evecs(i, p), viq = evecs(i, q);
                    evecs(i, p) = c * vip - s * viq;
                    evecs(i, q) = s * vip + c * viq;
                }
            }
    }
    evals.resize(n);
    for (std::size_t i = 0; i < n; ++i) evals[i] = a(i, i);
}

}  // namespace detail

inline Mat project_2d(const Mat& features) {
    const std::size_t M = features.rows(), d = features.cols();
    if (M < 3) throw contract_error("project_2d: need at least 3 points");
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += features(i, j);
    for (auto& m : mean) m /= M;
    Mat cov(d, d);
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b)
                cov(a, b) += (features(i, a) - mean[a]) * (features(i, b) - mean[b]) / M;

    std::vector<double> evals;
    Mat evecs;
    detail::jacobi_eigen(cov, evals, evecs);
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return evals[a] > evals[b]; });

    Mat out(M, 2);
    for (int comp = 0; comp < 2; ++comp) {
        if (static_cast<std::size_t>(comp) >= d || evals[order[comp]] <= 1e-12)
            continue;  // zero-padded component
        const std::size_t c = order[comp];
        std::size_t arg = 0;
        for (std::size_t j = 1; j < d; ++j)
            if (std::fabs(evecs(j, c)) > std::fabs(evecs(arg, c))) arg = j;
        const double sign = evecs(arg, c) >= 0.0 ? 1.0 : -1.0;
        for (std::size_t i = 0; i < M; ++i) {
            double v = 0.0;
            for (std::size_t j = 0; j < d; ++j) v += (features(i, j) - mean[j]) * evecs(j, c);
            out(i, comp) = sign * v;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-epoch metric row and CSV export.

struct MetricRow {
    int epoch = 0;
    double loss_total = 0.0, loss_ce = 0.0, loss_class = 0.0, loss_sub = 0.0;
    double acc = std::numeric_limits<double>::quiet_NaN();
    double auc = std::numeric_limits<double>::quiet_NaN();
    double a_dist = std::numeric_limits<double>::quiet_NaN();
    std::vector<int> clusters_per_class;
};

inline void write_metrics_csv(const std::vector<MetricRow>& rows, int n_classes,
                              const std::string& path) {
    std::ofstream f(path);
    if (!f) throw data_error("cannot open for writing: " + path);
    f << "epoch,loss_total,loss_ce,loss_class,loss_sub,acc,auc,a_dist";
    for (int n = 0; n < n_classes; ++n) f << ",k_c" << n;
    f << "\n";
    char buf[40];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        f << r.epoch << ',' << fmt(r.loss_total) << ',' << fmt(r.loss_ce) << ','
          << fmt(r.loss_class) << ',' << fmt(r.loss_sub) << ',' << fmt(r.acc) << ','
          << fmt(r.auc) << ',' << fmt(r.a_dist);
        for (int n = 0; n < n_classes; ++n)
            f << ',' << (n < static_cast<int>(r.clusters_per_class.size())
                             ? r.clusters_per_class[n]
                             : 0);
        f << "\n";
    }
}

}  // namespace subuda

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>
#include <vector>

#include "subuda/common.hpp"
#include "subuda/rng.hpp"

namespace subuda {

// Thresholds apply to SQUARED distances throughout. "More than m nodes" is
// strict: a component survives the filter iff its size > m.
struct SubgraphParams {
    double epsilon = 1.0;
    double tau = 1.0;
    int m = 1;

    void validate() const {
        if (!(epsilon > 0.0)) throw config_error("subgraph: epsilon must be > 0");
        if (tau < 0.0) throw config_error("subgraph: tau must be >= 0");
        if (m < 1) throw config_error("subgraph: m must be >= 1");
    }
};

struct KmeansResult {
    std::vector<int> assignments;
    Mat centroids;  // K x d
};

namespace detail {

inline int nearest_centroid(const Mat& points, std::size_t i, const Mat& centroids) {
    int best = 0;
    double best_d = sq_dist_rows(points, i, centroids, 0);
    for (std::size_t k = 1; k < centroids.rows(); ++k) {
        const double d = sq_dist_rows(points, i, centroids, k);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(k);
        }
    }
    return best;
}

}  // namespace detail

namespace detail {

// One Lloyd run from k-means++ seeding; runs to assignment fixpoint or
// max_iter. Empty clusters are re-seeded from the point farthest from its
// current centroid.
inline KmeansResult kmeans_once(const Mat& points, int K, Rng rng, int max_iter) {
    const std::size_t M = points.rows(), d = points.cols();
    Mat centroids(K, d);
    // k-means++ seeding
    std::vector<double> min_d2(M, std::numeric_limits<double>::infinity());
    std::size_t first = rng.below(M);
    for (std::size_t j = 0; j < d; ++j) centroids(0, j) = points(first, j);
    for (int k = 1; k < K; ++k) {
        double total = 0.0;
        for (std::size_t i = 0; i < M; ++i) {
            const double d2 = sq_dist_rows(points, i, centroids, k - 1);
            min_d2[i] = std::min(min_d2[i], d2);
            total += min_d2[i];
        }
        std::size_t chosen = 0;
        if (total <= 0.0) {
            chosen = rng.below(M);
        } else {
            double u = rng.uniform() * total, acc = 0.0;
            for (std::size_t i = 0; i < M; ++i) {
                acc += min_d2[i];
                if (u < acc) {
                    chosen = i;
                    break;
                }
                chosen = i;
            }
        }
        for (std::size_t j = 0; j < d; ++j) centroids(k, j) = points(chosen, j);
    }

    std::vector<int> assign(M, -1);
    for (int it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < M; ++i) {
            const int k = detail::nearest_centroid(points, i, centroids);
            if (k != assign[i]) {
                assign[i] = k;
                changed = true;
            }
        }
        // recompute means; re-seed empty clusters from the farthest point
        Mat sums(K, d);
        std::vector<int> counts(K, 0);
        for (std::size_t i = 0; i < M; ++i) {
            ++counts[assign[i]];
            for (std::size_t j = 0; j < d; ++j) sums(assign[i], j) += points(i, j);
        }
        for (int k = 0; k < K; ++k) {
            if (counts[k] > 0) {
                for (std::size_t j = 0; j < d; ++j) centroids(k, j) = sums(k, j) / counts[k];
            } else {
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < M; ++i) {
                    const double d2 = sq_dist_rows(points, i, centroids, assign[i]);
                    if (d2 > far_d) {
                        far_d = d2;
                        far = i;
                    }
                }
                for (std::size_t j = 0; j < d; ++j) centroids(k, j) = points(far, j);
                changed = true;
            }
        }
        if (!changed && it > 0) break;
    }
    // final assignment pass so every point sits with its nearest centroid
    for (std::size_t i = 0; i < M; ++i) assign[i] = nearest_centroid(points, i, centroids);
    return {std::move(assign), std::move(centroids)};
}

}  // namespace detail

inline double kmeans_sse(const Mat& points, const KmeansResult& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < points.rows(); ++i)
        s += sq_dist_rows(points, i, r.centroids, r.assignments[i]);
    return s;
}

// Best of n_init restarts by SSE; each restart draws its own seeding stream
// from the seed, so results stay deterministic.
inline KmeansResult kmeans(const Mat& points, int K, std::uint64_t seed, int max_iter = 100,
                           int n_init = 8) {
    if (K < 1 || points.rows() < static_cast<std::size_t>(K))
        throw config_error("kmeans: need M >= K >= 1");
    Rng rng(seed ^ 0x6B6D65616E73ULL);
    KmeansResult best;
    double best_sse = std::numeric_limits<double>::infinity();
    for (int r = 0; r < n_init; ++r) {
        KmeansResult res = detail::kmeans_once(points, K, rng.fork(r), max_iter);
        const double sse = kmeans_sse(points, res);
        if (sse < best_sse) {
            best_sse = sse;
            best = std::move(res);
        }
    }
    return best;
}

// Connected components of the reliability-path graph (edge iff squared
// distance <= epsilon), keeping only components of size strictly greater
// than m, ordered by smallest member index.
inline std::vector<std::vector<std::size_t>> build_subgraphs(const Mat& points,
                                                             const SubgraphParams& params) {
    params.validate();
    const std::size_t M = points.rows();
    std::vector<std::size_t> parent(M);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = i + 1; j < M; ++j)
            if (sq_dist_rows(points, i, points, j) <= params.epsilon)
                parent[find(i)] = find(j);

    std::vector<std::vector<std::size_t>> by_root(M);
    for (std::size_t i = 0; i < M; ++i) by_root[find(i)].push_back(i);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < M; ++i) {
        auto& comp = by_root[find(i)];
        if (!comp.empty() && comp.front() == i &&
            comp.size() > static_cast<std::size_t>(params.m))
            out.push_back(comp);
    }
    return out;
}

struct ClusterPairing {
    std::vector<std::pair<int, int>> links;  // (source k, target k')
    std::vector<bool> source_matched, target_matched;
};

// Greedy smallest-distance-first correspondence over the K*K' centroid
// pairs; ties break on (source index, target index).
inline ClusterPairing correspond_clusters(const Mat& mu_s, const Mat& mu_t) {
    const std::size_t K = mu_s.rows(), Kp = mu_t.rows();
    if (K == 0 || Kp == 0) throw contract_error("correspond_clusters: empty centroid list");
    std::vector<std::tuple<double, int, int>> pairs;
    pairs.reserve(K * Kp);
    for (std::size_t a = 0; a < K; ++a)
        for (std::size_t b = 0; b < Kp; ++b)
            pairs.emplace_back(sq_dist_rows(mu_s, a, mu_t, b), static_cast<int>(a),
                               static_cast<int>(b));
    std::sort(pairs.begin(), pairs.end());

    ClusterPairing out;
    out.source_matched.assign(K, false);
    out.target_matched.assign(Kp, false);
    const std::size_t want = std::min(K, Kp);
    for (const auto& [d2, a, b] : pairs) {
        (void)d2;
        if (out.links.size() == want) break;
        if (out.source_matched[a] || out.target_matched[b]) continue;
        out.source_matched[a] = true;
        out.target_matched[b] = true;
        out.links.emplace_back(a, b);
    }
    return out;
}

// Semi-hard target selection for one subtype: seed with candidates inside
// the tau-circle around the source subtype centroid, then grow along
// reliability-path edges within the candidate set.
inline std::vector<std::size_t> semi_hard_select(const Mat& candidates, const double* mu_s_k,
                                                 const SubgraphParams& params) {
    const std::size_t M = candidates.rows(), d = candidates.cols();
    std::vector<char> in(M, 0);
    std::vector<std::size_t> frontier;
    for (std::size_t i = 0; i < M; ++i)
        if (sq_dist(candidates.row(i), mu_s_k, d) <= params.tau) {
            in[i] = 1;
            frontier.push_back(i);
        }
    while (!frontier.empty()) {
        const std::size_t i = frontier.back();
        frontier.pop_back();
        for (std::size_t j = 0; j < M; ++j)
            if (!in[j] && sq_dist_rows(candidates, i, candidates, j) <= params.epsilon) {
                in[j] = 1;
                frontier.push_back(j);
            }
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < M; ++i)
        if (in[i]) out.push_back(i);
    return out;
}

// omega_k proportional to 1/sqrt(M_k^s + M_k^t), normalized so populated
// clusters average to 1; empty clusters get 0.
inline std::vector<double> subtype_weights(const std::vector<int>& counts_s,
                                           const std::vector<int>& counts_t) {
    const std::size_t K = counts_s.size();
    if (counts_t.size() != K) throw shape_error("subtype_weights: count length mismatch");
    std::vector<double> w(K, 0.0);
    double sum = 0.0;
    int positive = 0;
    for (std::size_t k = 0; k < K; ++k) {
        const int total = counts_s[k] + counts_t[k];
        if (total > 0) {
            w[k] = 1.0 / std::sqrt(static_cast<double>(total));
            sum += w[k];
            ++positive;
        }
    }
    if (positive == 0) throw contract_error("subtype_weights: no populated cluster");
    const double scale = positive / sum;
    for (auto& v : w) v *= scale;
    return w;
}

// One class's discovered subtype structure, in trainer-ready form.
struct SubtypeClustering {
    int K = 0;
    std::vector<int> assign_s;  // per source row of this class: k or -1
    std::vector<int> assign_t;  // per target candidate row: k or -1
    Mat mu_s, mu_t, mu_st;      // K x d; mu_st = (mu_s + mu_t)/2, or mu_s when M_k^t = 0
    std::vector<int> counts_s, counts_t;
    std::vector<double> omega;
};

struct CompactnessLoss {
    double value = 0.0;            // (1/K) sum_k omega_k * L_k
    std::vector<double> per_k;     // L_k
    Mat dfeat_s, dfeat_t;          // same shapes as the inputs
};

// Size-reweighted subtype compactness around mu_st, per class. mu_st is a constant for
// differentiation; gradients land on the assigned features only.
inline CompactnessLoss subtype_compactness_loss(const SubtypeClustering& c, const Mat& feats_s,
                                                const Mat& feats_t) {
    const std::size_t d = c.mu_st.cols();
    CompactnessLoss out;
    out.per_k.assign(c.K, 0.0);
    out.dfeat_s = Mat(feats_s.rows(), d);
    out.dfeat_t = Mat(feats_t.rows(), d);

    for (int k = 0; k < c.K; ++k) {
        if (c.counts_s[k] < 1) continue;  // invalid cluster: skipped entirely
        double lk = 0.0;
        for (std::size_t i = 0; i < feats_s.rows(); ++i)
            if (c.assign_s[i] == k) lk += sq_dist(feats_s.row(i), c.mu_st.row(k), d);
        lk /= c.counts_s[k];
        if (c.counts_t[k] > 0) {
            double lt = 0.0;
            for (std::size_t i = 0; i < feats_t.rows(); ++i)
                if (c.assign_t[i] == k) lt += sq_dist(feats_t.row(i), c.mu_st.row(k), d);
            lk += lt / c.counts_t[k];
        }
        out.per_k[k] = lk;
        out.value += c.omega[k] * lk;

        const double base = c.omega[k] / static_cast<double>(c.K);
        const double gs = base * 2.0 / c.counts_s[k];
        for (std::size_t i = 0; i < feats_s.rows(); ++i)
            if (c.assign_s[i] == k)
                for (std::size_t j = 0; j < d; ++j)
                    out.dfeat_s(i, j) += gs * (feats_s(i, j) - c.mu_st(k, j));
        if (c.counts_t[k] > 0) {
            const double gt = base * 2.0 / c.counts_t[k];
            for (std::size_t i = 0; i < feats_t.rows(); ++i)
                if (c.assign_t[i] == k)
                    for (std::size_t j = 0; j < d; ++j)
                        out.dfeat_t(i, j) += gt * (feats_t(i, j) - c.mu_st(k, j));
        }
    }
    out.value /= c.K;
    return out;
}

}  // namespace subuda

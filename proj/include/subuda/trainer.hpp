#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "subuda/common.hpp"
#include "subuda/data.hpp"
#include "subuda/encoder.hpp"
#include "subuda/eval.hpp"
#include "subuda/prototypes.hpp"
#include "subuda/rng.hpp"
#include "subuda/subtyping.hpp"

namespace subuda {

enum class SubtypeMode { kmeans, subgraph };

struct TrainConfig {
    double alpha = 1.0;
    double beta = 0.5;
    SubtypeMode subtype_mode = SubtypeMode::kmeans;
    std::vector<int> kn;  // per class (kmeans mode); resized to n_classes
    SubgraphParams subgraph{1.0, 1.0, 8};
    double lr = 1e-2;
    double momentum = 0.9;
    int batch = 64;  // total per step, split evenly across domains
    int epochs = 30;
    std::uint64_t seed = 0;
    double ema = 0.9;
    EncoderConfig encoder;
    // ablation switches
    bool disable_omega = false;
    bool disable_tau = false;        // skip semi-hard mining: keep all candidates
    bool pooled_mu_st = false;       // mu_st = pooled sample mean instead of (mu_s+mu_t)/2
    bool disable_head = false;
    bool no_subtype_targets = false;  // subtype terms use source samples only

    void validate(int n_classes) const {
        if (alpha < 0.0 || beta < 0.0) throw config_error("alpha and beta must be >= 0");
        if (batch < 2) throw config_error("batch size must be >= 2");
        if (epochs < 0) throw config_error("epochs must be >= 0");
        if (!(lr > 0.0)) throw config_error("learning rate must be > 0");
        if (ema < 0.0 || ema >= 1.0) throw config_error("ema momentum must be in [0,1)");
        if (subtype_mode == SubtypeMode::kmeans) {
            if (static_cast<int>(kn.size()) != n_classes)
                throw config_error("kn must list one K per class");
            for (int k : kn)
                if (k < 1) throw config_error("kn entries must be >= 1");
        } else {
            subgraph.validate();
        }
    }
};

struct LossBreakdown {
    double ce = 0.0, class_match = 0.0, subtype = 0.0, total = 0.0;
    std::vector<double> class_match_per_class;  // NaN when excluded
    std::vector<double> subtype_per_class;      // NaN when excluded
    int n_match_included = 0, n_subtype_included = 0;
    int skipped_classes = 0, fallback_classes = 0;
};

namespace detail {

enum class CentroidUpdate { none, adopt, ema };

struct ClassSubtypePlan {
    bool active = false;
    bool fallback = false;
    std::vector<std::size_t> rows_s, rows_t;  // batch row indices of this class
    SubtypeClustering clustering;             // assignments indexed by rows order
};

}  // namespace detail

// Frozen per-step structure: labels, assignments, selections and every
// stop-gradient constant. Given a plan, the objective is a smooth function
// of the two feature matrices, which is what makes the analytic gradients
// finite-difference checkable.
struct StepPlan {
    std::vector<int> labels_s, pseudo_t;
    Mat c_s_post, c_t_post;  // post-EMA centroids (constants; also bank write-back)
    std::vector<bool> init_s_post, init_t_post;
    Mat c_s_old, c_t_old;
    std::vector<detail::CentroidUpdate> upd_s, upd_t;
    std::vector<int> count_s, count_t;  // batch counts per class
    std::vector<detail::ClassSubtypePlan> classes;
    int skipped = 0, fallbacks = 0;
    double ema = 0.9;
};

namespace detail {

inline Mat submatrix(const Mat& m, const std::vector<std::size_t>& rows) {
    Mat out(rows.size(), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(rows[i], j);
    return out;
}

// Cluster means for the final assignments; clusters that ended up empty keep
// zero rows and zero counts.
inline void means_from_assignments(const Mat& pts, const std::vector<int>& assign, int K,
                                   Mat& mu, std::vector<int>& counts) {
    mu = Mat(K, pts.cols());
    counts.assign(K, 0);
    for (std::size_t i = 0; i < pts.rows(); ++i) {
        const int k = assign[i];
        if (k < 0) continue;
        ++counts[k];
        for (std::size_t j = 0; j < pts.cols(); ++j) mu(k, j) += pts(i, j);
    }
    for (int k = 0; k < K; ++k)
        if (counts[k] > 0)
            for (std::size_t j = 0; j < pts.cols(); ++j) mu(k, j) /= counts[k];
}

inline void finish_clustering(SubtypeClustering& c, const Mat& fs, const Mat& ft,
                              const TrainConfig& cfg) {
    means_from_assignments(fs, c.assign_s, c.K, c.mu_s, c.counts_s);
    // targets in clusters without source support carry no subtype term
    for (auto& a : c.assign_t)
        if (a >= 0 && c.counts_s[a] == 0) a = -1;
    means_from_assignments(ft, c.assign_t, c.K, c.mu_t, c.counts_t);
    c.mu_st = Mat(c.K, c.mu_s.cols());
    for (int k = 0; k < c.K; ++k) {
        if (cfg.pooled_mu_st) {
            const int total = c.counts_s[k] + c.counts_t[k];
            if (total == 0) continue;
            for (std::size_t j = 0; j < c.mu_st.cols(); ++j)
                c.mu_st(k, j) = (c.mu_s(k, j) * c.counts_s[k] + c.mu_t(k, j) * c.counts_t[k]) /
                                total;
        } else if (c.counts_t[k] > 0) {
            for (std::size_t j = 0; j < c.mu_st.cols(); ++j)
                c.mu_st(k, j) = 0.5 * (c.mu_s(k, j) + c.mu_t(k, j));
        } else {
            for (std::size_t j = 0; j < c.mu_st.cols(); ++j) c.mu_st(k, j) = c.mu_s(k, j);
        }
    }
    if (cfg.disable_omega) {
        c.omega.assign(c.K, 1.0);
    } else {
        c.omega = subtype_weights(c.counts_s, c.counts_t);
    }
}

}  // namespace detail

inline StepPlan build_step_plan(const Mat& feats_s, const std::vector<int>& labels_s,
                                const Mat& feats_t, const CentroidBank& bank,
                                const TrainConfig& cfg, std::uint64_t step_seed) {
    const int N = bank.n_classes();
    StepPlan plan;
    plan.ema = bank.ema_momentum;
    plan.labels_s = labels_s;
    plan.c_s_old = bank.c_s;
    plan.c_t_old = bank.c_t;
    plan.c_s_post = bank.c_s;
    plan.c_t_post = bank.c_t;
    plan.init_s_post = bank.init_s;
    plan.init_t_post = bank.init_t;
    plan.upd_s.assign(N, detail::CentroidUpdate::none);
    plan.upd_t.assign(N, detail::CentroidUpdate::none);

    // source centroids + EMA
    const auto bc_s = batch_centroids(feats_s, labels_s, N);
    plan.count_s = bc_s.counts;
    for (int n = 0; n < N; ++n) {
        if (bc_s.counts[n] == 0) continue;
        if (!plan.init_s_post[n]) {
            plan.upd_s[n] = detail::CentroidUpdate::adopt;
            for (std::size_t j = 0; j < plan.c_s_post.cols(); ++j)
                plan.c_s_post(n, j) = bc_s.centroids(n, j);
            plan.init_s_post[n] = true;
        } else {
            plan.upd_s[n] = detail::CentroidUpdate::ema;
            for (std::size_t j = 0; j < plan.c_s_post.cols(); ++j)
                plan.c_s_post(n, j) = plan.ema * plan.c_s_post(n, j) +
                                      (1.0 - plan.ema) * bc_s.centroids(n, j);
        }
    }

    // pseudo class labels against the refreshed source centroids; restrict
    // to classes seen so far
    std::vector<int> live;
    for (int n = 0; n < N; ++n)
        if (plan.init_s_post[n]) live.push_back(n);
    if (live.empty()) throw contract_error("build_step_plan: no initialized source centroid");
    Mat live_c(live.size(), plan.c_s_post.cols());
    for (std::size_t i = 0; i < live.size(); ++i)
        for (std::size_t j = 0; j < live_c.cols(); ++j) live_c(i, j) = plan.c_s_post(live[i], j);
    plan.pseudo_t = assign_pseudo_class(feats_t, live_c);
    for (auto& p : plan.pseudo_t) p = live[p];

    // target centroids + EMA
    const auto bc_t = batch_centroids(feats_t, plan.pseudo_t, N);
    plan.count_t = bc_t.counts;
    for (int n = 0; n < N; ++n) {
        if (bc_t.counts[n] == 0) continue;
        if (!plan.init_t_post[n]) {
            plan.upd_t[n] = detail::CentroidUpdate::adopt;
            for (std::size_t j = 0; j < plan.c_t_post.cols(); ++j)
                plan.c_t_post(n, j) = bc_t.centroids(n, j);
            plan.init_t_post[n] = true;
        } else {
            plan.upd_t[n] = detail::CentroidUpdate::ema;
            for (std::size_t j = 0; j < plan.c_t_post.cols(); ++j)
                plan.c_t_post(n, j) = plan.ema * plan.c_t_post(n, j) +
                                      (1.0 - plan.ema) * bc_t.centroids(n, j);
        }
    }

    // per-class subtype structure
    Rng rng(step_seed ^ 0x737465702DULL);
    plan.classes.resize(N);
    for (int n = 0; n < N; ++n) {
        auto& cp = plan.classes[n];
        for (std::size_t i = 0; i < feats_s.rows(); ++i)
            if (labels_s[i] == n) cp.rows_s.push_back(i);
        for (std::size_t i = 0; i < feats_t.rows(); ++i)
            if (plan.pseudo_t[i] == n) cp.rows_t.push_back(i);
        if (cp.rows_s.empty()) {
            ++plan.skipped;
            continue;
        }
        const Mat fs = detail::submatrix(feats_s, cp.rows_s);
        const Mat ft = detail::submatrix(feats_t, cp.rows_t);
        auto& c = cp.clustering;

        bool fell_back = false;
        if (cfg.subtype_mode == SubtypeMode::kmeans) {
            const int K = cfg.kn[n];
            if (static_cast<int>(cp.rows_s.size()) < K) {
                fell_back = true;
            } else {
                c.K = K;
                const auto km = kmeans(fs, K, rng.fork(n).next_u64());
                c.assign_s = km.assignments;
                Mat mu_s;
                std::vector<int> counts_s;
                detail::means_from_assignments(fs, c.assign_s, K, mu_s, counts_s);
                c.assign_t.assign(cp.rows_t.size(), -1);
                if (!cp.rows_t.empty()) {
                    if (static_cast<int>(cp.rows_t.size()) >= K) {
                        const auto km_t = kmeans(ft, K, rng.fork(n + N).next_u64());
                        Mat mu_t;
                        std::vector<int> counts_t;
                        detail::means_from_assignments(ft, km_t.assignments, K, mu_t, counts_t);
                        const auto pairing = correspond_clusters(mu_s, mu_t);
                        std::vector<int> relabel(K, -1);
                        for (const auto& [a, b] : pairing.links) relabel[b] = a;
                        for (std::size_t i = 0; i < cp.rows_t.size(); ++i)
                            c.assign_t[i] = relabel[km_t.assignments[i]];
                    } else {
                        for (std::size_t i = 0; i < cp.rows_t.size(); ++i)
                            c.assign_t[i] = detail::nearest_centroid(ft, i, mu_s);
                    }
                }
            }
        } else {
            const auto comps = build_subgraphs(fs, cfg.subgraph);
            if (comps.empty()) {
                fell_back = true;
            } else {
                c.K = static_cast<int>(comps.size());
                c.assign_s.assign(cp.rows_s.size(), -1);
                for (int k = 0; k < c.K; ++k)
                    for (std::size_t i : comps[k]) c.assign_s[i] = k;
                Mat mu_s;
                std::vector<int> counts_s;
                detail::means_from_assignments(fs, c.assign_s, c.K, mu_s, counts_s);
                c.assign_t.assign(cp.rows_t.size(), -1);
                if (!cp.rows_t.empty()) {
                    std::vector<int> provisional(cp.rows_t.size());
                    for (std::size_t i = 0; i < cp.rows_t.size(); ++i)
                        provisional[i] = detail::nearest_centroid(ft, i, mu_s);
                    for (int k = 0; k < c.K; ++k) {
                        std::vector<std::size_t> cand;
                        for (std::size_t i = 0; i < provisional.size(); ++i)
                            if (provisional[i] == k) cand.push_back(i);
                        if (cand.empty()) continue;
                        if (cfg.disable_tau) {
                            for (std::size_t i : cand) c.assign_t[i] = k;
                        } else {
                            const Mat cm = detail::submatrix(ft, cand);
                            for (std::size_t i : semi_hard_select(cm, mu_s.row(k), cfg.subgraph))
                                c.assign_t[cand[i]] = k;
                        }
                    }
                }
            }
        }
        if (fell_back) {
            // degenerate clustering: class-level compactness (K = 1)
            cp.fallback = true;
            ++plan.fallbacks;
            c.K = 1;
            c.assign_s.assign(cp.rows_s.size(), 0);
            c.assign_t.assign(cp.rows_t.size(), 0);
            if (cfg.subtype_mode == SubtypeMode::subgraph && !cfg.disable_tau &&
                !cp.rows_t.empty()) {
                // the reliability gate applies to the degenerate cluster too
                const std::vector<int> zeros(cp.rows_s.size(), 0);
                Mat mu;
                std::vector<int> cnt;
                detail::means_from_assignments(fs, zeros, 1, mu, cnt);
                c.assign_t.assign(cp.rows_t.size(), -1);
                for (std::size_t i : semi_hard_select(ft, mu.row(0), cfg.subgraph))
                    c.assign_t[i] = 0;
            }
        }
        if (cfg.no_subtype_targets)
            std::fill(c.assign_t.begin(), c.assign_t.end(), -1);
        detail::finish_clustering(c, fs, ft, cfg);
        cp.active = true;
    }
    return plan;
}

// Full training objective and its gradient w.r.t. the feature matrices, with the
// plan's discrete structure and EMA memory held fixed.
struct ObjectiveResult {
    LossBreakdown loss;
    Mat dfeat_s, dfeat_t;
};

inline ObjectiveResult eval_objective(const Mat& feats_s, const Mat& feats_t,
                                      const StepPlan& plan, const TrainConfig& cfg) {
    const int N = static_cast<int>(plan.init_s_post.size());
    const std::size_t d = feats_s.cols();
    ObjectiveResult out;
    out.loss.skipped_classes = plan.skipped;
    out.loss.fallback_classes = plan.fallbacks;
    out.loss.class_match_per_class.assign(N, std::numeric_limits<double>::quiet_NaN());
    out.loss.subtype_per_class.assign(N, std::numeric_limits<double>::quiet_NaN());

    // source CE against the refreshed centroids (constants)
    auto [ce, dce] = class_ce_loss(feats_s, plan.labels_s, plan.c_s_post, &plan.init_s_post);
    out.loss.ce = ce;
    out.dfeat_s = std::move(dce);
    out.dfeat_t = Mat(feats_t.rows(), d);

    // class matching: centroids recomputed with frozen EMA memory so the
    // chain rule reaches this batch's features
    const auto bc_s = batch_centroids(feats_s, plan.labels_s, N);
    const auto bc_t = batch_centroids(feats_t, plan.pseudo_t, N);
    auto centroid_of = [&](Domain dom, int n, std::size_t j) {
        const bool src = dom == Domain::source;
        const auto upd = src ? plan.upd_s[n] : plan.upd_t[n];
        const Mat& old = src ? plan.c_s_old : plan.c_t_old;
        const Mat& batch = src ? bc_s.centroids : bc_t.centroids;
        switch (upd) {
            case detail::CentroidUpdate::none: return old(n, j);
            case detail::CentroidUpdate::adopt: return batch(n, j);
            default: return plan.ema * old(n, j) + (1.0 - plan.ema) * batch(n, j);
        }
    };
    std::vector<int> matched;
    for (int n = 0; n < N; ++n)
        if (plan.init_s_post[n] && plan.init_t_post[n]) matched.push_back(n);
    out.loss.n_match_included = static_cast<int>(matched.size());
    double match_sum = 0.0;
    std::vector<std::vector<double>> diff(N);
    for (int n : matched) {
        diff[n].resize(d);
        double v = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            diff[n][j] = centroid_of(Domain::source, n, j) - centroid_of(Domain::target, n, j);
            v += diff[n][j] * diff[n][j];
        }
        out.loss.class_match_per_class[n] = v;
        match_sum += v;
    }
    out.loss.class_match = matched.empty() ? 0.0 : match_sum / matched.size();
    if (!matched.empty() && cfg.alpha > 0.0) {
        const double scale = cfg.alpha / matched.size();
        for (std::size_t i = 0; i < feats_s.rows(); ++i) {
            const int n = plan.labels_s[i];
            if (!plan.init_t_post[n] || plan.upd_s[n] == detail::CentroidUpdate::none) continue;
            const double rho = plan.upd_s[n] == detail::CentroidUpdate::adopt
                                   ? 1.0
                                   : (1.0 - plan.ema);
            const double coef = scale * 2.0 * rho / plan.count_s[n];
            for (std::size_t j = 0; j < d; ++j) out.dfeat_s(i, j) += coef * diff[n][j];
        }
        for (std::size_t i = 0; i < feats_t.rows(); ++i) {
            const int n = plan.pseudo_t[i];
            if (!plan.init_s_post[n] || plan.upd_t[n] == detail::CentroidUpdate::none) continue;
            const double rho = plan.upd_t[n] == detail::CentroidUpdate::adopt
                                   ? 1.0
                                   : (1.0 - plan.ema);
            const double coef = -scale * 2.0 * rho / plan.count_t[n];
            for (std::size_t j = 0; j < d; ++j) out.dfeat_t(i, j) += coef * diff[n][j];
        }
    }

    // subtype compactness
    int n_sub = 0;
    for (int n = 0; n < N; ++n)
        if (plan.classes[n].active) ++n_sub;
    out.loss.n_subtype_included = n_sub;
    double sub_sum = 0.0;
    if (n_sub > 0) {
        const double scale = cfg.beta / n_sub;
        for (int n = 0; n < N; ++n) {
            const auto& cp = plan.classes[n];
            if (!cp.active) continue;
            const Mat fs = detail::submatrix(feats_s, cp.rows_s);
            const Mat ft = detail::submatrix(feats_t, cp.rows_t);
            const auto comp = subtype_compactness_loss(cp.clustering, fs, ft);
            out.loss.subtype_per_class[n] = comp.value;
            sub_sum += comp.value;
            if (cfg.beta > 0.0) {
                for (std::size_t i = 0; i < cp.rows_s.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        out.dfeat_s(cp.rows_s[i], j) += scale * comp.dfeat_s(i, j);
                for (std::size_t i = 0; i < cp.rows_t.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        out.dfeat_t(cp.rows_t[i], j) += scale * comp.dfeat_t(i, j);
            }
        }
        out.loss.subtype = sub_sum / n_sub;
    }

    out.loss.total = out.loss.ce + cfg.alpha * out.loss.class_match + cfg.beta * out.loss.subtype;
    return out;
}

// ---------------------------------------------------------------------------
// SGD with momentum, one training step, and the epoch loop.

struct SgdState {
    std::vector<std::vector<double>> velocity;
};

inline void sgd_update(Encoder& encoder, const GradientSet& grads, SgdState& state,
                       double lr, double momentum) {
    auto refs = encoder.params();
    if (state.velocity.empty())
        for (const auto& r : refs) state.velocity.emplace_back(r.data->size(), 0.0);
    for (std::size_t p = 0; p < refs.size(); ++p)
        for (std::size_t k = 0; k < refs[p].data->size(); ++k) {
            state.velocity[p][k] = momentum * state.velocity[p][k] - lr * grads[p][k];
            (*refs[p].data)[k] += state.velocity[p][k];
        }
}

struct StepResult {
    LossBreakdown loss;
    std::vector<int> clusters_per_class;
};

inline StepResult train_step(Encoder& encoder, CentroidBank& bank, const Mat& batch_s,
                             const std::vector<int>& labels_s, const Mat& batch_t,
                             const TrainConfig& cfg, Rng& rng, SgdState& sgd) {
    // alpha = beta = 0 is the source-only baseline: no target batch is ever
    // forwarded, so neither gradients nor normalization statistics can leak
    // target information into it
    const bool source_only = cfg.alpha == 0.0 && cfg.beta == 0.0;
    Encoder::Cache cache_s, cache_t;
    Rng drop_rng = rng.fork(11);
    const Mat fs = encoder.forward(batch_s, Mode::train, &drop_rng, &cache_s);
    const Mat ft = source_only ? Mat(0, fs.cols())
                               : encoder.forward(batch_t, Mode::train, &drop_rng, &cache_t);

    const StepPlan plan = build_step_plan(fs, labels_s, ft, bank, cfg, rng.fork(13).next_u64());
    auto obj = eval_objective(fs, ft, plan, cfg);

    GradientSet grads = encoder.backward(cache_s, obj.dfeat_s);
    if (!source_only) {
        const GradientSet gt = encoder.backward(cache_t, obj.dfeat_t);
        for (std::size_t p = 0; p < grads.size(); ++p)
            for (std::size_t k = 0; k < grads[p].size(); ++k) grads[p][k] += gt[p][k];
    }
    sgd_update(encoder, grads, sgd, cfg.lr, cfg.momentum);

    // commit the EMA memory
    bank.c_s = plan.c_s_post;
    bank.c_t = plan.c_t_post;
    bank.init_s = plan.init_s_post;
    bank.init_t = plan.init_t_post;

    StepResult out;
    out.loss = std::move(obj.loss);
    for (const auto& cp : plan.classes)
        out.clusters_per_class.push_back(cp.active ? cp.clustering.K : 0);
    rng.next_u64();  // advance the step stream
    return out;
}

struct Prediction {
    std::vector<int> labels;
    Mat probs;
};

// Distance-softmax probabilities against the source class prototypes; ties take the
// lowest class index.
inline Prediction predict(Encoder& encoder, const CentroidBank& bank, const Mat& inputs) {
    for (bool b : bank.init_s)
        if (!b) throw contract_error("predict: uninitialized centroid bank");
    const Mat feats = encoder.forward(inputs, Mode::eval, nullptr);
    Prediction out;
    out.probs = prototypical_probs(feats, bank.c_s);
    out.labels.resize(inputs.rows());
    for (std::size_t i = 0; i < inputs.rows(); ++i) {
        int best = 0;
        for (std::size_t n = 1; n < out.probs.cols(); ++n)
            if (out.probs(i, n) > out.probs(i, best)) best = static_cast<int>(n);
        out.labels[i] = best;
    }
    return out;
}

struct FitResult {
    Encoder encoder;
    CentroidBank bank;
    std::vector<MetricRow> history;
};

inline FitResult fit(Dataset& ds, const TrainConfig& cfg) {
    cfg.validate(ds.n_classes);
    auto idx_s = ds.indices(Domain::source);
    auto idx_t = ds.indices(Domain::target);
    if (idx_s.empty() || idx_t.empty())
        throw config_error("fit: dataset must contain both domains");

    EncoderConfig ecfg = cfg.encoder;
    ecfg.input_dim = ds.input_dim;
    ecfg.use_head = !cfg.disable_head;
    FitResult res;
    res.encoder = Encoder(ecfg, cfg.seed);
    res.bank = CentroidBank(ds.n_classes, res.encoder.feature_dim(), cfg.ema);

    const int half = cfg.batch / 2;
    const int n_batches = static_cast<int>(
        std::min(idx_s.size() / half, idx_t.size() / half));
    if (cfg.epochs > 0 && n_batches < 1)
        throw config_error("fit: batch size exceeds a domain");

    SgdState sgd;
    Rng master(cfg.seed);
    std::vector<int> last_k(ds.n_classes, 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = master.fork(1000 + epoch);
        auto shuffle = [&](std::vector<std::size_t>& v, std::uint64_t key) {
            Rng r = erng.fork(key);
            for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[r.below(i)]);
        };
        shuffle(idx_s, 1);
        shuffle(idx_t, 2);

        MetricRow row;
        row.epoch = epoch;
        for (int b = 0; b < n_batches; ++b) {
            std::vector<std::size_t> bs(idx_s.begin() + b * half, idx_s.begin() + (b + 1) * half);
            std::vector<std::size_t> bt(idx_t.begin() + b * half, idx_t.begin() + (b + 1) * half);
            Mat xs = feature_matrix(ds, bs);
            Mat xt = feature_matrix(ds, bt);
            std::vector<int> ys(bs.size());
            for (std::size_t i = 0; i < bs.size(); ++i) {
                if (!ds.samples[bs[i]].class_label)
                    throw data_error("fit: source sample without class label");
                ys[i] = *ds.samples[bs[i]].class_label;
            }
            Rng srng = erng.fork(100 + b);
            const auto step = train_step(res.encoder, res.bank, xs, ys, xt, cfg, srng, sgd);
            row.loss_total += step.loss.total;
            row.loss_ce += step.loss.ce;
            row.loss_class += step.loss.class_match;
            row.loss_sub += step.loss.subtype;
            for (int n = 0; n < ds.n_classes; ++n)
                if (step.clusters_per_class[n] > 0) last_k[n] = step.clusters_per_class[n];
        }
        row.loss_total /= n_batches;
        row.loss_ce /= n_batches;
        row.loss_class /= n_batches;
        row.loss_sub /= n_batches;
        row.clusters_per_class = last_k;

        // end-of-epoch metrics on the target domain; pseudo labels are
        // refreshed on the dataset as a side product
        const Mat xt_all = feature_matrix(ds, idx_t);
        const auto pred = predict(res.encoder, res.bank, xt_all);
        std::vector<int> truth;
        std::vector<int> pred_labeled;
        std::vector<double> pos, neg;
        for (std::size_t i = 0; i < idx_t.size(); ++i) {
            ds.samples[idx_t[i]].pseudo_class = pred.labels[i];
            const auto& lab = ds.samples[idx_t[i]].class_label;
            if (lab) {
                truth.push_back(*lab);
                pred_labeled.push_back(pred.labels[i]);
                if (ds.n_classes == 2)
                    (*lab == 1 ? pos : neg).push_back(pred.probs(i, 1));
            }
        }
        if (!truth.empty()) row.acc = accuracy(pred_labeled, truth);
        if (!pos.empty() && !neg.empty()) row.auc = auc(pos, neg);
        const Mat fs_all = res.encoder.forward(feature_matrix(ds, idx_s), Mode::eval, nullptr);
        const Mat ft_all = res.encoder.forward(xt_all, Mode::eval, nullptr);
        if (fs_all.rows() >= 10 && ft_all.rows() >= 10)
            row.a_dist = proxy_a_distance(fs_all, ft_all, master.fork(7000 + epoch).next_u64());
        res.history.push_back(std::move(row));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Finite-difference check of the full objective gradient, deterministic mode
// (eval-mode normalization, no dropout). The plan is built once from the
// unperturbed features and frozen, matching the stop-gradient semantics of
// the analytic path.

inline GradCheckReport objective_grad_check(const Encoder& encoder, const Mat& batch_s,
                                            const std::vector<int>& labels_s, const Mat& batch_t,
                                            const CentroidBank& bank, const TrainConfig& cfg,
                                            double tolerance, double step = 1e-4,
                                            std::uint64_t plan_seed = 0) {
    Encoder enc = encoder;
    Encoder::Cache cache_s, cache_t;
    const Mat fs = enc.forward(batch_s, Mode::eval, nullptr, &cache_s);
    const Mat ft = enc.forward(batch_t, Mode::eval, nullptr, &cache_t);
    const StepPlan plan = build_step_plan(fs, labels_s, ft, bank, cfg, plan_seed);

    const auto obj = eval_objective(fs, ft, plan, cfg);
    GradientSet analytic = enc.backward(cache_s, obj.dfeat_s);
    const GradientSet gt = enc.backward(cache_t, obj.dfeat_t);
    for (std::size_t p = 0; p < analytic.size(); ++p)
        for (std::size_t k = 0; k < analytic[p].size(); ++k) analytic[p][k] += gt[p][k];

    auto loss_at = [&](Encoder& e) {
        const Mat a = e.forward(batch_s, Mode::eval, nullptr);
        const Mat b = e.forward(batch_t, Mode::eval, nullptr);
        return eval_objective(a, b, plan, cfg).loss.total;
    };

    GradCheckReport report;
    auto refs = enc.params();
    for (std::size_t p = 0; p < refs.size(); ++p) {
        GradCheckEntry entry{refs[p].name, 0.0};
        for (std::size_t k = 0; k < refs[p].data->size(); ++k) {
            double& v = (*refs[p].data)[k];
            const double orig = v;
            v = orig + step;
            const double lp = loss_at(enc);
            v = orig - step;
            const double lm = loss_at(enc);
            v = orig;
            const double fd = (lp - lm) / (2.0 * step);
            const double an = analytic[p][k];
            const double denom = std::max(std::fabs(fd), std::fabs(an));
            const double err = denom < 1e-8 ? 0.0 : std::fabs(fd - an) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, err);
        }
        report.worst = std::max(report.worst, entry.max_rel_err);
        report.per_param.push_back(std::move(entry));
    }
    report.passed = report.worst <= tolerance;
    return report;
}

}  // namespace subuda

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "subuda/common.hpp"

namespace subuda {

// Per-class source/target class centroids with EMA memory. Joint
// source+target centroids are deliberately not kept: they move when one
// domain is oversampled, so they are useless under label shift.
struct CentroidBank {
    Mat c_s, c_t;  // N x d
    std::vector<bool> init_s, init_t;
    double ema_momentum = 0.9;

    CentroidBank() = default;
    CentroidBank(int n_classes, int dim, double momentum = 0.9)
        : c_s(n_classes, dim),
          c_t(n_classes, dim),
          init_s(n_classes, false),
          init_t(n_classes, false),
          ema_momentum(momentum) {}

    int n_classes() const { return static_cast<int>(init_s.size()); }

    // First sighting of a class adopts the batch centroid directly; after
    // that new = rho*old + (1-rho)*batch.
    void ema_update(Domain dom, int cls, const double* batch_centroid) {
        Mat& c = dom == Domain::source ? c_s : c_t;
        auto& init = dom == Domain::source ? init_s : init_t;
        if (!init[cls]) {
            for (std::size_t j = 0; j < c.cols(); ++j) c(cls, j) = batch_centroid[j];
            init[cls] = true;
        } else {
            for (std::size_t j = 0; j < c.cols(); ++j)
                c(cls, j) = ema_momentum * c(cls, j) + (1.0 - ema_momentum) * batch_centroid[j];
        }
    }
};

struct BatchCentroids {
    Mat centroids;            // N x d; rows of absent classes are zero
    std::vector<int> counts;  // per class
};

inline BatchCentroids batch_centroids(const Mat& features, const std::vector<int>& labels,
                                      int n_classes) {
    if (features.rows() != labels.size())
        throw shape_error("batch_centroids: labels/features length mismatch");
    BatchCentroids out;
    out.centroids = Mat(n_classes, features.cols());
    out.counts.assign(n_classes, 0);
    for (std::size_t i = 0; i < features.rows(); ++i) {
        const int n = labels[i];
        if (n < 0 || n >= n_classes) throw contract_error("batch_centroids: label out of range");
        ++out.counts[n];
        for (std::size_t j = 0; j < features.cols(); ++j)
            out.centroids(n, j) += features(i, j);
    }
    for (int n = 0; n < n_classes; ++n)
        if (out.counts[n] > 0)
            for (std::size_t j = 0; j < features.cols(); ++j)
                out.centroids(n, j) /= out.counts[n];
    return out;
}

// Softmax over negative squared distances to the class centroids, with
// max-subtraction for stability.
inline std::vector<double> prototypical_probs(const double* feature, const Mat& centroids) {
    const std::size_t N = centroids.rows(), d = centroids.cols();
    std::vector<double> logits(N);
    for (std::size_t n = 0; n < N; ++n) logits[n] = -sq_dist(feature, centroids.row(n), d);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (auto& l : logits) {
        l = std::exp(l - mx);
        z += l;
    }
    for (auto& l : logits) l /= z;
    return logits;
}

inline Mat prototypical_probs(const Mat& features, const Mat& centroids) {
    Mat out(features.rows(), centroids.rows());
    for (std::size_t i = 0; i < features.rows(); ++i) {
        const auto p = prototypical_probs(features.row(i), centroids);
        for (std::size_t n = 0; n < p.size(); ++n) out(i, n) = p[n];
    }
    return out;
}

// Mean -log p(y|x) over the batch. Centroids are constants (EMA memory);
// the gradient is returned w.r.t. the features only.
inline std::pair<double, Mat> class_ce_loss(const Mat& features, const std::vector<int>& labels,
                                            const Mat& centroids,
                                            const std::vector<bool>* initialized = nullptr) {
    const std::size_t M = features.rows(), N = centroids.rows(), d = centroids.cols();
    if (M != labels.size()) throw shape_error("class_ce_loss: labels length mismatch");
    if (initialized)
        for (int l : labels)
            if (!(*initialized)[l])
                throw contract_error("class_ce_loss: uninitialized centroid for class " +
                                     std::to_string(l));
    double loss = 0.0;
    Mat dfeat(M, d);
    for (std::size_t i = 0; i < M; ++i) {
        const auto p = prototypical_probs(features.row(i), centroids);
        const int y = labels[i];
        loss += -std::log(std::max(p[y], 1e-300));
        // d(-log p_y)/df = sum_n (p_n - [n==y]) * dlogit_n/df, logit_n = -||f-c_n||^2
        for (std::size_t n = 0; n < N; ++n) {
            const double coef = (p[n] - (static_cast<int>(n) == y ? 1.0 : 0.0)) * (-2.0);
            for (std::size_t j = 0; j < d; ++j)
                dfeat(i, j) += coef * (features(i, j) - centroids(n, j));
        }
    }
    const double invM = 1.0 / static_cast<double>(M);
    loss *= invM;
    for (auto& g : dfeat.data()) g *= invM;
    return {loss, dfeat};
}

// Nearest source class centroid; ties go to the lowest class index.
inline std::vector<int> assign_pseudo_class(const Mat& features_t, const Mat& source_centroids) {
    std::vector<int> out(features_t.rows());
    for (std::size_t i = 0; i < features_t.rows(); ++i) {
        int best = 0;
        double best_d = sq_dist_rows(features_t, i, source_centroids, 0);
        for (std::size_t n = 1; n < source_centroids.rows(); ++n) {
            const double d = sq_dist_rows(features_t, i, source_centroids, n);
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(n);
            }
        }
        out[i] = best;
    }
    return out;
}

struct ClassMatchingLoss {
    double value = 0.0;
    std::vector<double> per_class;   // ||c_n^s - c_n^t||^2, NaN when skipped
    std::vector<bool> included;
    int n_included = 0;
    bool empty = false;  // warning flag: no class had both centroids
};

// L^class averaged over classes with both centroids present.
inline ClassMatchingLoss class_matching_loss(const CentroidBank& bank) {
    ClassMatchingLoss out;
    const int N = bank.n_classes();
    out.per_class.assign(N, std::numeric_limits<double>::quiet_NaN());
    out.included.assign(N, false);
    for (int n = 0; n < N; ++n) {
        if (!bank.init_s[n] || !bank.init_t[n]) continue;
        out.per_class[n] = sq_dist_rows(bank.c_s, n, bank.c_t, n);
        out.included[n] = true;
        out.value += out.per_class[n];
        ++out.n_included;
    }
    if (out.n_included == 0) {
        out.empty = true;
        out.value = 0.0;
    } else {
        out.value /= out.n_included;
    }
    return out;
}

}  // namespace subuda

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "subuda/common.hpp"
#include "subuda/rng.hpp"

namespace subuda {

enum class Mode { train, eval };

struct Affine {
    Mat W;                  // out x in
    std::vector<double> b;  // out
};

struct BatchNorm {
    std::vector<double> gamma, beta, running_mean, running_var;
    double momentum = 0.9;
    double eps = 1e-5;  // variance floor; zero within-batch variance maps to 0
};

struct EncoderConfig {
    int input_dim = 8;
    std::vector<int> hidden = {32, 32};  // backbone sizes, relu after each
    int head_dim = 16;
    bool use_head = true;
    double dropout = 0.5;
    double bn_momentum = 0.9;
};

// Named view into one parameter tensor.
struct ParamRef {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double>* data;
};

// Gradients aligned with Encoder::params() order.
using GradientSet = std::vector<std::vector<double>>;

namespace detail {

struct AffineCache {
    Mat input;
};
struct BnCache {
    Mat xhat;
    std::vector<double> inv_std;
    Mode mode;
};

}  // namespace detail

// f(.): fully-connected backbone (affine+relu per hidden layer) followed by
// the reduction head fc -> bn -> relu -> dropout -> fc -> relu. The head
// output is the metric space for every centroid and loss; the backbone
// output is kept in the cache for diagnostics only.
class Encoder {
  public:
    struct Cache {
        std::vector<detail::AffineCache> backbone_in;
        std::vector<Mat> relu_out;  // post-relu activations per backbone layer
        Mat backbone_features;      // read-only diagnostic view
        detail::AffineCache head_fc1_in;
        detail::BnCache bn;
        Mat head_relu1_out;
        Mat dropout_mask;  // already includes 1/(1-p) scaling
        detail::AffineCache head_fc2_in;
        Mat head_out;  // final features (post relu)
        bool valid = false;
    };

    Encoder() = default;

    Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        Rng rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
        int in = cfg.input_dim;
        for (int h : cfg.hidden) {
            backbone_.push_back(init_affine(h, in, rng));
            in = h;
        }
        backbone_out_ = in;
        if (cfg.use_head) {
            head_fc1_ = init_affine(cfg.head_dim, in, rng);
            head_bn_.gamma.assign(cfg.head_dim, 1.0);
            head_bn_.beta.assign(cfg.head_dim, 0.0);
            head_bn_.running_mean.assign(cfg.head_dim, 0.0);
            head_bn_.running_var.assign(cfg.head_dim, 1.0);
            head_bn_.momentum = cfg.bn_momentum;
            head_fc2_ = init_affine(cfg.head_dim, cfg.head_dim, rng);
        }
    }

    const EncoderConfig& config() const { return cfg_; }
    int feature_dim() const { return cfg_.use_head ? cfg_.head_dim : backbone_out_; }

    Mat forward(const Mat& batch, Mode mode, Rng* rng, Cache* cache_out = nullptr) {
        if (static_cast<int>(batch.cols()) != cfg_.input_dim)
            throw shape_error("forward: batch has " + std::to_string(batch.cols()) +
                              " columns, expected " + std::to_string(cfg_.input_dim));
        if (mode == Mode::train && cfg_.dropout > 0.0 && cfg_.use_head && rng == nullptr)
            throw contract_error("forward: train mode with dropout needs an rng");

        Cache cache;
        Mat x = batch;
        for (auto& layer : backbone_) {
            cache.backbone_in.push_back({x});
            x = affine_forward(layer, x);
            relu_inplace(x);
            cache.relu_out.push_back(x);
        }
        cache.backbone_features = x;
        if (cfg_.use_head) {
            cache.head_fc1_in = {x};
            x = affine_forward(head_fc1_, x);
            x = bn_forward(head_bn_, x, mode, cache.bn);
            relu_inplace(x);
            cache.head_relu1_out = x;
            x = dropout_forward(x, mode, rng, cache.dropout_mask);
            cache.head_fc2_in = {x};
            x = affine_forward(head_fc2_, x);
            relu_inplace(x);
        }
        cache.head_out = x;
        cache.valid = true;
        if (cache_out) *cache_out = std::move(cache);
        return x;
    }

    GradientSet backward(Cache& cache, const Mat& upstream) {
        if (!cache.valid) throw contract_error("backward: stale or reused cache");
        if (!upstream.same_shape(cache.head_out))
            throw shape_error("backward: upstream shape mismatch");
        cache.valid = false;

        GradientSet grads = zero_grads();
        std::size_t gi = grads.size();
        Mat d = upstream;

        if (cfg_.use_head) {
            relu_backward(d, cache.head_out);
            // head_fc2 grads occupy the last two slots before bn/fc1 blocks
            const std::size_t fc2_w = gi - 2, fc2_b = gi - 1;
            d = affine_backward(head_fc2_, cache.head_fc2_in, d, grads[fc2_w], grads[fc2_b]);
            dropout_backward(d, cache.dropout_mask);
            relu_backward(d, cache.head_relu1_out);
            const std::size_t bn_g = gi - 4, bn_b = gi - 3;
            d = bn_backward(head_bn_, cache.bn, d, grads[bn_g], grads[bn_b]);
            const std::size_t fc1_w = gi - 6, fc1_b = gi - 5;
            d = affine_backward(head_fc1_, cache.head_fc1_in, d, grads[fc1_w], grads[fc1_b]);
            gi -= 6;
        }
        for (std::size_t li = backbone_.size(); li-- > 0;) {
            relu_backward(d, cache.relu_out[li]);
            d = affine_backward(backbone_[li], cache.backbone_in[li], d, grads[2 * li],
                                grads[2 * li + 1]);
        }
        return grads;
    }

    // Parameter views in a stable order; gradients and optimizer state use
    // the same order. Running statistics are state, not parameters, and are
    // listed separately by state_tensors().
    std::vector<ParamRef> params() {
        std::vector<ParamRef> out;
        for (std::size_t i = 0; i < backbone_.size(); ++i) {
            auto tag = "backbone." + std::to_string(i);
            out.push_back({tag + ".W", {backbone_[i].W.rows(), backbone_[i].W.cols()},
                           &backbone_[i].W.data()});
            out.push_back({tag + ".b", {backbone_[i].b.size()}, &backbone_[i].b});
        }
        if (cfg_.use_head) {
            out.push_back({"head.fc1.W", {head_fc1_.W.rows(), head_fc1_.W.cols()},
                           &head_fc1_.W.data()});
            out.push_back({"head.fc1.b", {head_fc1_.b.size()}, &head_fc1_.b});
            out.push_back({"head.bn.gamma", {head_bn_.gamma.size()}, &head_bn_.gamma});
            out.push_back({"head.bn.beta", {head_bn_.beta.size()}, &head_bn_.beta});
            out.push_back({"head.fc2.W", {head_fc2_.W.rows(), head_fc2_.W.cols()},
                           &head_fc2_.W.data()});
            out.push_back({"head.fc2.b", {head_fc2_.b.size()}, &head_fc2_.b});
        }
        return out;
    }

    std::vector<ParamRef> state_tensors() {
        std::vector<ParamRef> out;
        if (cfg_.use_head) {
            out.push_back({"head.bn.running_mean", {head_bn_.running_mean.size()},
                           &head_bn_.running_mean});
            out.push_back({"head.bn.running_var", {head_bn_.running_var.size()},
                           &head_bn_.running_var});
        }
        return out;
    }

    GradientSet zero_grads() {
        GradientSet g;
        for (const auto& p : params()) g.emplace_back(p.data->size(), 0.0);
        return g;
    }

  private:
    static Affine init_affine(int out, int in, Rng& rng) {
        Affine a;
        a.W = Mat(out, in);
        a.b.assign(out, 0.0);
        const double bound = std::sqrt(1.0 / in);
        for (auto& w : a.W.data()) w = rng.uniform(-bound, bound);
        return a;
    }

    static Mat affine_forward(const Affine& a, const Mat& x) {
        const std::size_t M = x.rows(), in = x.cols(), out = a.W.rows();
        if (in != a.W.cols()) throw shape_error("affine: input dim mismatch");
        Mat y(M, out);
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t o = 0; o < out; ++o) {
                double s = a.b[o];
                for (std::size_t j = 0; j < in; ++j) s += x(i, j) * a.W(o, j);
                y(i, o) = s;
            }
        return y;
    }

    static Mat affine_backward(const Affine& a, const detail::AffineCache& c, const Mat& dy,
                               std::vector<double>& dW, std::vector<double>& db) {
        const Mat& x = c.input;
        const std::size_t M = x.rows(), in = x.cols(), out = a.W.rows();
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t o = 0; o < out; ++o) {
                const double g = dy(i, o);
                db[o] += g;
                for (std::size_t j = 0; j < in; ++j) dW[o * in + j] += g * x(i, j);
            }
        Mat dx(M, in);
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < in; ++j) {
                double s = 0.0;
                for (std::size_t o = 0; o < out; ++o) s += dy(i, o) * a.W(o, j);
                dx(i, j) = s;
            }
        return dx;
    }

    static void relu_inplace(Mat& x) {
        for (auto& v : x.data()) v = v > 0.0 ? v : 0.0;
    }

    // post holds the relu OUTPUT; gradient passes where output > 0.
    static void relu_backward(Mat& d, const Mat& post) {
        for (std::size_t i = 0; i < d.data().size(); ++i)
            if (post.data()[i] <= 0.0) d.data()[i] = 0.0;
    }

    Mat bn_forward(BatchNorm& bn, const Mat& x, Mode mode, detail::BnCache& c) {
        const std::size_t M = x.rows(), D = x.cols();
        Mat y(M, D);
        c.xhat = Mat(M, D);
        c.inv_std.assign(D, 0.0);
        c.mode = mode;
        for (std::size_t j = 0; j < D; ++j) {
            double mean, var;
            if (mode == Mode::train) {
                mean = 0.0;
                for (std::size_t i = 0; i < M; ++i) mean += x(i, j);
                mean /= static_cast<double>(M);
                var = 0.0;
                for (std::size_t i = 0; i < M; ++i) {
                    const double d = x(i, j) - mean;
                    var += d * d;
                }
                var /= static_cast<double>(M);
                bn.running_mean[j] = bn.momentum * bn.running_mean[j] + (1.0 - bn.momentum) * mean;
                bn.running_var[j] = bn.momentum * bn.running_var[j] + (1.0 - bn.momentum) * var;
            } else {
                mean = bn.running_mean[j];
                var = bn.running_var[j];
            }
            const double inv = 1.0 / std::sqrt(var + bn.eps);
            c.inv_std[j] = inv;
            for (std::size_t i = 0; i < M; ++i) {
                const double xh = (x(i, j) - mean) * inv;
                c.xhat(i, j) = xh;
                y(i, j) = bn.gamma[j] * xh + bn.beta[j];
            }
        }
        return y;
    }

    static Mat bn_backward(const BatchNorm& bn, const detail::BnCache& c, const Mat& dy,
                           std::vector<double>& dgamma, std::vector<double>& dbeta) {
        const std::size_t M = dy.rows(), D = dy.cols();
        Mat dx(M, D);
        for (std::size_t j = 0; j < D; ++j) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::size_t i = 0; i < M; ++i) {
                dgamma[j] += dy(i, j) * c.xhat(i, j);
                dbeta[j] += dy(i, j);
                const double dxh = dy(i, j) * bn.gamma[j];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * c.xhat(i, j);
            }
            if (c.mode == Mode::train) {
                const double invM = 1.0 / static_cast<double>(M);
                for (std::size_t i = 0; i < M; ++i) {
                    const double dxh = dy(i, j) * bn.gamma[j];
                    dx(i, j) = c.inv_std[j] *
                               (dxh - invM * sum_dxhat - c.xhat(i, j) * invM * sum_dxhat_xhat);
                }
            } else {
                for (std::size_t i = 0; i < M; ++i)
                    dx(i, j) = dy(i, j) * bn.gamma[j] * c.inv_std[j];
            }
        }
        return dx;
    }

    Mat dropout_forward(const Mat& x, Mode mode, Rng* rng, Mat& mask) const {
        mask = Mat(x.rows(), x.cols(), 1.0);
        if (mode != Mode::train || cfg_.dropout <= 0.0) return x;
        const double keep = 1.0 - cfg_.dropout;
        Mat y = x;
        for (std::size_t i = 0; i < y.data().size(); ++i) {
            const double m = rng->uniform() < keep ? 1.0 / keep : 0.0;
            mask.data()[i] = m;
            y.data()[i] *= m;
        }
        return y;
    }

    static void dropout_backward(Mat& d, const Mat& mask) {
        for (std::size_t i = 0; i < d.data().size(); ++i) d.data()[i] *= mask.data()[i];
    }

    EncoderConfig cfg_;
    std::vector<Affine> backbone_;
    int backbone_out_ = 0;
    Affine head_fc1_, head_fc2_;
    BatchNorm head_bn_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check, eval-mode only. loss_fn maps features to
// (scalar, dL/dfeatures); the analytic path goes through backward(), the
// numeric path re-runs forward on a copy with perturbed parameters.

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_param;
    double worst = 0.0;
    bool passed = false;
};

using LossFn = std::function<std::pair<double, Mat>(const Mat&)>;

inline GradCheckReport grad_check(const Encoder& encoder, const Mat& batch, const LossFn& loss_fn,
                                  double tolerance, double step = 1e-4) {
    Encoder enc = encoder;
    Encoder::Cache cache;
    const Mat feats = enc.forward(batch, Mode::eval, nullptr, &cache);
    auto [loss0, dfeat] = loss_fn(feats);
    (void)loss0;
    const GradientSet analytic = enc.backward(cache, dfeat);

    GradCheckReport report;
    auto refs = enc.params();
    for (std::size_t p = 0; p < refs.size(); ++p) {
        GradCheckEntry entry{refs[p].name, 0.0};
        for (std::size_t k = 0; k < refs[p].data->size(); ++k) {
            double& v = (*refs[p].data)[k];
            const double orig = v;
            v = orig + step;
            const double lp = loss_fn(enc.forward(batch, Mode::eval, nullptr)).first;
            v = orig - step;
            const double lm = loss_fn(enc.forward(batch, Mode::eval, nullptr)).first;
            v = orig;
            const double fd = (lp - lm) / (2.0 * step);
            const double an = analytic[p][k];
            const double denom = std::max(std::fabs(fd), std::fabs(an));
            const double err = denom < 1e-10 ? 0.0 : std::fabs(fd - an) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, err);
        }
        report.worst = std::max(report.worst, entry.max_rel_err);
        report.per_param.push_back(std::move(entry));
    }
    report.passed = report.worst <= tolerance;
    return report;
}

}  // namespace subuda

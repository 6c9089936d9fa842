#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "subuda/config.hpp"
#include "subuda/trainer.hpp"

using namespace subuda;

namespace {

Dataset two_class_set(std::uint64_t seed, int n_per_domain = 120) {
    SyntheticSpec s;
    s.n_classes = 2;
    s.n_subtypes = 2;
    s.dim = 4;
    s.means = {{-4, 0, 0, 0}, {-2, 0, 0, 0}, {4, 0, 0, 0}, {2, 0, 0, 0}};
    s.shifts = {{0, 0.5, 0, 0}, {0, 0.5, 0, 0}, {0, 0.5, 0, 0}, {0, 0.5, 0, 0}};
    s.sigmas = {0.5, 0.5, 0.5, 0.5};
    s.source_pi = {0.25, 0.25, 0.25, 0.25};
    s.target_pi = {0.3, 0.2, 0.3, 0.2};
    s.n_source = n_per_domain;
    s.n_target = n_per_domain;
    s.seed = seed;
    return generate_synthetic(s);
}

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.kn = {2, 2};
    cfg.batch = 32;
    cfg.epochs = 3;
    cfg.seed = 11;
    cfg.encoder.hidden = {8};
    cfg.encoder.head_dim = 4;
    cfg.encoder.dropout = 0.0;
    return cfg;
}

// Zero biases leave dead rows exactly on the relu kink where central
// differences are one-sided; shift to a generic point before FD checks.
void jitter_biases(Encoder& enc, Rng& rng) {
    for (auto& ref : enc.params())
        if (ref.name.ends_with(".b") || ref.name.ends_with("beta"))
            for (auto& v : *ref.data) v = rng.uniform(0.05, 0.35);
}

struct Batches {
    Mat xs, xt;
    std::vector<int> ys;
};

Batches first_batches(Dataset& ds, std::size_t half) {
    auto idx_s = ds.indices(Domain::source);
    auto idx_t = ds.indices(Domain::target);
    idx_s.resize(half);
    idx_t.resize(half);
    Batches b{feature_matrix(ds, idx_s), feature_matrix(ds, idx_t), {}};
    for (std::size_t i : idx_s) b.ys.push_back(*ds.samples[i].class_label);
    return b;
}

}  // namespace

TEST_CASE("loss breakdown recomposes into the total") {
    auto ds = two_class_set(1);
    const auto cfg = small_config();
    Encoder enc(EncoderConfig{.input_dim = 4, .hidden = {8}, .head_dim = 4, .dropout = 0.0},
                cfg.seed);
    CentroidBank bank(2, enc.feature_dim(), cfg.ema);
    const auto b = first_batches(ds, 16);
    const Mat fs = enc.forward(b.xs, Mode::eval, nullptr);
    const Mat ft = enc.forward(b.xt, Mode::eval, nullptr);
    const auto plan = build_step_plan(fs, b.ys, ft, bank, cfg, 5);
    const auto obj = eval_objective(fs, ft, plan, cfg);
    REQUIRE(obj.loss.total ==
            Catch::Approx(obj.loss.ce + cfg.alpha * obj.loss.class_match +
                          cfg.beta * obj.loss.subtype)
                .epsilon(1e-12));
    // per-class arrays average back to the aggregates
    double msum = 0.0;
    int mcount = 0;
    for (double v : obj.loss.class_match_per_class)
        if (!std::isnan(v)) {
            msum += v;
            ++mcount;
        }
    REQUIRE(mcount == obj.loss.n_match_included);
    REQUIRE(obj.loss.class_match == Catch::Approx(msum / mcount).epsilon(1e-12));
}

TEST_CASE("alpha = beta = 0 reduces the objective to the ce term") {
    auto ds = two_class_set(2);
    auto cfg = small_config();
    Encoder enc(EncoderConfig{.input_dim = 4, .hidden = {8}, .head_dim = 4, .dropout = 0.0},
                cfg.seed);
    CentroidBank bank(2, enc.feature_dim(), cfg.ema);
    const auto b = first_batches(ds, 16);
    const Mat fs = enc.forward(b.xs, Mode::eval, nullptr);
    const Mat ft = enc.forward(b.xt, Mode::eval, nullptr);
    const auto plan = build_step_plan(fs, b.ys, ft, bank, cfg, 5);

    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    const auto bare = eval_objective(fs, ft, plan, cfg);
    REQUIRE(bare.loss.total == bare.loss.ce);
    for (double v : bare.dfeat_t.data()) REQUIRE(v == 0.0);

    cfg.alpha = 1.0;
    const auto nobeta = eval_objective(fs, ft, plan, cfg);
    REQUIRE(nobeta.loss.total ==
            Catch::Approx(nobeta.loss.ce + nobeta.loss.class_match).epsilon(1e-12));
}

TEST_CASE("training drives the total loss down") {
    auto ds = two_class_set(3, 200);
    auto cfg = small_config();
    cfg.epochs = 8;
    cfg.lr = 5e-3;
    auto res = fit(ds, cfg);
    REQUIRE(res.history.size() == 8);
    const double first = res.history.front().loss_total;
    const double last = res.history.back().loss_total;
    REQUIRE(last < first);
    REQUIRE(std::isfinite(last));
}

TEST_CASE("fit is bit-for-bit deterministic in the seed") {
    auto ds1 = two_class_set(4);
    auto ds2 = two_class_set(4);
    const auto cfg = small_config();
    const auto r1 = fit(ds1, cfg);
    const auto r2 = fit(ds2, cfg);
    REQUIRE(r1.history.size() == r2.history.size());
    for (std::size_t e = 0; e < r1.history.size(); ++e) {
        REQUIRE(r1.history[e].loss_total == r2.history[e].loss_total);
        REQUIRE(r1.history[e].acc == r2.history[e].acc);
    }
    const auto p1 = r1.encoder;
    const auto p2 = r2.encoder;
    auto refs1 = const_cast<Encoder&>(p1).params();
    auto refs2 = const_cast<Encoder&>(p2).params();
    for (std::size_t p = 0; p < refs1.size(); ++p)
        REQUIRE(*refs1[p].data == *refs2[p].data);
}

TEST_CASE("zero epochs yields an empty history and an untouched bank") {
    auto ds = two_class_set(5);
    auto cfg = small_config();
    cfg.epochs = 0;
    const auto res = fit(ds, cfg);
    REQUIRE(res.history.empty());
    for (bool b : res.bank.init_s) REQUIRE_FALSE(b);
}

TEST_CASE("predict returns argmax labels over valid probabilities") {
    auto ds = two_class_set(6);
    auto cfg = small_config();
    cfg.epochs = 2;
    auto res = fit(ds, cfg);
    const auto idx_t = ds.indices(Domain::target);
    const Mat xt = feature_matrix(ds, idx_t);
    const auto pred = predict(res.encoder, res.bank, xt);
    REQUIRE(pred.labels.size() == xt.rows());
    for (std::size_t i = 0; i < xt.rows(); ++i) {
        double sum = 0.0;
        for (std::size_t n = 0; n < pred.probs.cols(); ++n) {
            sum += pred.probs(i, n);
            REQUIRE(pred.probs(i, pred.labels[i]) >= pred.probs(i, n));
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("predict refuses an uninitialized bank") {
    Encoder enc(EncoderConfig{.input_dim = 4, .hidden = {8}, .head_dim = 4}, 0);
    CentroidBank bank(2, enc.feature_dim());
    REQUIRE_THROWS_AS(predict(enc, bank, Mat(3, 4)), contract_error);
}

TEST_CASE("tau = 0 matches the no-subtype-targets variant term by term") {
    auto ds = two_class_set(7);
    auto cfg = small_config();
    cfg.subtype_mode = SubtypeMode::subgraph;
    cfg.subgraph = {2.0, 0.0, 1};
    Encoder enc(EncoderConfig{.input_dim = 4, .hidden = {8}, .head_dim = 4, .dropout = 0.0},
                cfg.seed);
    CentroidBank bank(2, enc.feature_dim(), cfg.ema);
    const auto b = first_batches(ds, 20);
    const Mat fs = enc.forward(b.xs, Mode::eval, nullptr);
    const Mat ft = enc.forward(b.xt, Mode::eval, nullptr);
    const auto plan_tau0 = build_step_plan(fs, b.ys, ft, bank, cfg, 5);

    auto cfg2 = cfg;
    cfg2.subgraph.tau = 10.0;
    cfg2.no_subtype_targets = true;
    const auto plan_nt = build_step_plan(fs, b.ys, ft, bank, cfg2, 5);

    const auto o1 = eval_objective(fs, ft, plan_tau0, cfg);
    const auto o2 = eval_objective(fs, ft, plan_nt, cfg2);
    REQUIRE(o1.loss.ce == o2.loss.ce);
    REQUIRE(o1.loss.class_match == o2.loss.class_match);
    REQUIRE(o1.loss.subtype == Catch::Approx(o2.loss.subtype).margin(1e-12));
    REQUIRE(o1.loss.total == Catch::Approx(o2.loss.total).margin(1e-12));
}

TEST_CASE("objective gradient matches finite differences (kmeans mode)") {
    auto ds = two_class_set(8);
    auto cfg = small_config();
    Encoder enc(EncoderConfig{.input_dim = 4, .hidden = {6}, .head_dim = 3, .dropout = 0.0},
                21);
    Rng jrng(91);
    jitter_biases(enc, jrng);
    CentroidBank bank(2, enc.feature_dim(), cfg.ema);
    const auto b = first_batches(ds, 12);
    const auto report = objective_grad_check(enc, b.xs, b.ys, b.xt, bank, cfg, 1e-4);
    INFO("worst rel err " << report.worst);
    REQUIRE(report.passed);
}

TEST_CASE("objective gradient matches finite differences (subgraph mode)") {
    auto ds = two_class_set(9);
    auto cfg = small_config();
    cfg.subtype_mode = SubtypeMode::subgraph;
    cfg.subgraph = {4.0, 2.0, 1};
    Encoder enc(EncoderConfig{.input_dim = 4, .hidden = {6}, .head_dim = 3, .dropout = 0.0},
                22);
    Rng jrng(92);
    jitter_biases(enc, jrng);
    CentroidBank bank(2, enc.feature_dim(), cfg.ema);
    const auto b = first_batches(ds, 12);
    const auto report = objective_grad_check(enc, b.xs, b.ys, b.xt, bank, cfg, 1e-4);
    INFO("worst rel err " << report.worst);
    REQUIRE(report.passed);
}

TEST_CASE("objective gradient with a warm ema bank matches finite differences") {
    auto ds = two_class_set(10);
    auto cfg = small_config();
    Encoder enc(EncoderConfig{.input_dim = 4, .hidden = {6}, .head_dim = 3, .dropout = 0.0},
                23);
    Rng jrng(93);
    jitter_biases(enc, jrng);
    CentroidBank bank(2, enc.feature_dim(), cfg.ema);
    // warm the bank with one committed step so the ema path is exercised
    SgdState sgd;
    Rng rng(3);
    auto b0 = first_batches(ds, 12);
    train_step(enc, bank, b0.xs, b0.ys, b0.xt, cfg, rng, sgd);
    for (bool v : bank.init_s) REQUIRE(v);

    const auto report = objective_grad_check(enc, b0.xs, b0.ys, b0.xt, bank, cfg, 1e-4);
    INFO("worst rel err " << report.worst);
    REQUIRE(report.passed);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.kn = {2};
    REQUIRE_THROWS_AS(cfg.validate(2), config_error);
    cfg.kn = {2, 0};
    REQUIRE_THROWS_AS(cfg.validate(2), config_error);
    cfg.kn = {2, 2};
    cfg.validate(2);
    cfg.ema = 1.0;
    REQUIRE_THROWS_AS(cfg.validate(2), config_error);
}

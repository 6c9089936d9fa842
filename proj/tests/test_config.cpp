#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "subuda/config.hpp"

using namespace subuda;

namespace {

std::string write_temp(const char* name, const std::string& body) {
    const auto p = (std::filesystem::temp_directory_path() / name).string();
    std::ofstream(p) << body;
    return p;
}

}  // namespace

TEST_CASE("kv parsing: comments, blanks, whitespace") {
    const auto p = write_temp("subuda_cfg1.txt",
                              "# header comment\n"
                              "alpha = 2.5\n"
                              "\n"
                              "  beta=0.25   # trailing comment\n"
                              "mode = kmeans\n");
    const auto kv = parse_kv_file(p);
    REQUIRE(kv.at("alpha") == "2.5");
    REQUIRE(kv.at("beta") == "0.25");
    REQUIRE(kv.at("mode") == "kmeans");
    REQUIRE(kv.size() == 3);
    std::remove(p.c_str());
}

TEST_CASE("kv parsing errors name the line") {
    const auto p = write_temp("subuda_cfg2.txt", "alpha = 1\nnot a pair\n");
    REQUIRE_THROWS_WITH(parse_kv_file(p), Catch::Matchers::ContainsSubstring(":2"));
    std::ofstream(p) << "alpha = 1\nalpha = 2\n";
    REQUIRE_THROWS_WITH(parse_kv_file(p), Catch::Matchers::ContainsSubstring("duplicate"));
    std::remove(p.c_str());
    REQUIRE_THROWS_AS(parse_kv_file("/nonexistent/subuda.cfg"), config_error);
}

TEST_CASE("unknown keys are rejected by name") {
    KvConfig kv{{"alhpa", "1"}};
    REQUIRE_THROWS_WITH(build_train_config(kv, 2),
                        Catch::Matchers::ContainsSubstring("alhpa"));
}

TEST_CASE("train config defaults") {
    const auto cfg = build_train_config({}, 2);
    REQUIRE(cfg.alpha == 1.0);
    REQUIRE(cfg.beta == 0.5);
    REQUIRE(cfg.subtype_mode == SubtypeMode::kmeans);
    REQUIRE(cfg.kn == std::vector<int>{4, 4});
    REQUIRE(cfg.subgraph.epsilon == 1.0);
    REQUIRE(cfg.subgraph.m == 8);
    REQUIRE(cfg.batch == 64);
    REQUIRE(cfg.epochs == 30);
    REQUIRE(cfg.encoder.dropout == 0.5);
    REQUIRE(cfg.encoder.head_dim == 16);
    REQUIRE(cfg.encoder.hidden == std::vector<int>{32, 32});
}

TEST_CASE("kn handling: scalar, per-class list, auto") {
    REQUIRE(build_train_config({{"kn", "3"}}, 4).kn == std::vector<int>{3, 3, 3, 3});
    REQUIRE(build_train_config({{"kn", "2,5"}}, 2).kn == std::vector<int>{2, 5});
    REQUIRE_THROWS_AS(build_train_config({{"kn", "2,5"}}, 3), config_error);
    REQUIRE(build_train_config({{"kn", "auto"}}, 2).subtype_mode == SubtypeMode::subgraph);
    REQUIRE(build_train_config({{"mode", "subgraph"}}, 2).subtype_mode ==
            SubtypeMode::subgraph);
    REQUIRE_THROWS_AS(build_train_config({{"mode", "dbscan"}}, 2), config_error);
}

TEST_CASE("numeric and boolean parsing errors") {
    REQUIRE_THROWS_AS(build_train_config({{"alpha", "fast"}}, 2), config_error);
    REQUIRE_THROWS_AS(build_train_config({{"epochs", "3.5"}}, 2), config_error);
    REQUIRE_THROWS_AS(build_train_config({{"disable_omega", "yes"}}, 2), config_error);
    REQUIRE(build_train_config({{"disable_omega", "true"}}, 2).disable_omega);
    REQUIRE(build_train_config({{"disable_omega", "0"}}, 2).disable_omega == false);
}

TEST_CASE("hidden layer list") {
    const auto cfg = build_train_config({{"hidden", "16,8,4"}}, 2);
    REQUIRE(cfg.encoder.hidden == std::vector<int>{16, 8, 4});
    REQUIRE_THROWS_AS(build_train_config({{"hidden", "16,,4"}}, 2), config_error);
}

TEST_CASE("synthetic spec defaults and determinism") {
    const auto spec = build_synthetic_spec({});
    REQUIRE(spec.n_classes == 2);
    REQUIRE(spec.n_subtypes == 4);
    REQUIRE(spec.dim == 8);
    REQUIRE(spec.means.size() == 8);
    for (double p : spec.source_pi) REQUIRE(p == Catch::Approx(1.0 / 8).epsilon(1e-12));
    // shift magnitude defaults to 2 sigma
    double norm = 0.0;
    for (double v : spec.shifts[0]) norm += v * v;
    REQUIRE(std::sqrt(norm) == Catch::Approx(2.0).epsilon(1e-9));

    const auto again = build_synthetic_spec({});
    REQUIRE(spec.means == again.means);
    REQUIRE(spec.shifts == again.shifts);
}

TEST_CASE("pi parsing: per-class row and full table") {
    const auto row = build_synthetic_spec({{"target_pi", "0.4,0.3,0.2,0.1"}});
    // replicated across both classes, halved to sum to one
    REQUIRE(row.target_pi[0] == Catch::Approx(0.2).epsilon(1e-12));
    REQUIRE(row.target_pi[4] == Catch::Approx(0.2).epsilon(1e-12));
    REQUIRE(row.target_pi[3] == Catch::Approx(0.05).epsilon(1e-12));

    const auto full = build_synthetic_spec(
        {{"subtypes", "2"}, {"source_pi", "1,1,2,4"}});
    REQUIRE(full.source_pi == std::vector<double>{0.125, 0.125, 0.25, 0.5});
    REQUIRE_THROWS_AS(build_synthetic_spec({{"source_pi", "0.5,0.5,0.5"}}), config_error);
    const auto uni = build_synthetic_spec({{"source_pi", "uniform"}});
    REQUIRE(uni.source_pi[0] == Catch::Approx(1.0 / 8).epsilon(1e-12));
}

TEST_CASE("generator spec magnitudes follow sigma scaling") {
    const auto spec = build_synthetic_spec({{"sigma", "0.5"}});
    REQUIRE(spec.sigmas[0] == 0.5);
    double norm = 0.0;
    for (double v : spec.shifts[0]) norm += v * v;
    REQUIRE(std::sqrt(norm) == Catch::Approx(1.0).epsilon(1e-9));
}

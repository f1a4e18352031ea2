#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "pma/analysis.hpp"
#include "pma/errors.hpp"
#include "pma/numerics.hpp"
#include "pma/rng.hpp"

using namespace pma;

namespace {

AttentionTrace make_trace(Tensor w, std::size_t m, std::vector<std::size_t> visible = {}) {
    AttentionTrace t;
    t.weights = std::move(w);
    t.memory_cols = m;
    t.visible_inputs = std::move(visible);
    return t;
}

TrainConfig grid_config() {
    TrainConfig c;
    apply_config(c, {{"layers", "1"}, {"d-model", "16"}, {"heads", "2"}, {"ffn-dim", "32"}, {"m", "4"},
                     {"t-bank", "4"}, {"stride", "2"}, {"topk", "4"}, {"batch", "8"}, {"steps", "12"},
                     {"n-train", "48"}, {"n-val", "12"}, {"n-test", "12"}, {"d-feat", "8"}, {"warmup", "4"},
                     {"constant-until", "8"}, {"decay-until", "12"}, {"peak-lr", "3e-3"}, {"floor-lr", "1e-4"}});
    return c;
}

std::vector<std::string> split_lines(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string line; std::getline(ss, line);) out.push_back(line);
    return out;
}

}  // namespace

TEST_CASE("lipschitz ratio degenerate cases") {
    Rng rng(1);
    Tensor keys = Tensor::matrix(5, 3);
    for (double& v : keys.values()) v = rng.normal();
    std::vector<double> q{0.3, -1.0, 2.0}, zero_delta(3, 0.0), delta{0.1, 0.2, -0.05};
    CHECK(lipschitz_ratio(q, keys, 2, zero_delta, 1.0) == 0.0);
    std::vector<double> zq(3, 0.0);
    CHECK(lipschitz_ratio(zq, keys, 2, delta, 1.0) == 0.0);

    // hand recomputation of one instance
    Tensor k2 = keys;
    for (std::size_t j = 0; j < 3; ++j) k2.at(2, j) += delta[j];
    Tensor ql = Tensor::matrix(1, 3);
    for (std::size_t j = 0; j < 3; ++j) ql[j] = q[j];
    Tensor a = softmax_rows(matmul_nt(ql, keys)), b = softmax_rows(matmul_nt(ql, k2));
    double diff = 0.0;
    for (std::size_t i = 0; i < 5; ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
    const double eps = std::sqrt(0.01 + 0.04 + 0.0025);
    const double qn = std::sqrt(0.09 + 1.0 + 4.0);
    CHECK(lipschitz_ratio(q, keys, 2, delta, 1.0) == doctest::Approx(std::sqrt(diff) / (eps * qn)).epsilon(1e-12));
}

TEST_CASE("lipschitz verifier") {
    BoundOptions o;
    o.trials = 2000;
    o.seed = 4;
    auto r = verify_lipschitz_bound(o);
    CHECK(r.trials == 2000);
    CHECK(r.passed());
    CHECK(r.max_ratio <= 1.0 + 1e-9);
    CHECK(r.max_ratio > 0.0);
    CHECK(r.max_scaled_excess <= 1.0 + 1e-9);
    auto again = verify_lipschitz_bound(o);
    CHECK(to_json(again) == to_json(r));
    auto single = verify_lipschitz_bound(4, 7, 200, 0.5, 3);
    CHECK(single.passed());
    auto j = nlohmann::json::parse(to_json(r));
    CHECK(j["trials"] == 2000);
}

TEST_CASE("profile on crafted traces") {
    // two samples, one layer; sample 0 has 3 positions, sample 1 has 2
    std::vector<std::vector<AttentionTrace>> traces(2);
    traces[0].push_back(make_trace(Tensor::from_rows({{0.5, 0.3, 0.2, 0.0, 0.0},
                                                      {0.2, 0.2, 0.3, 0.3, 0.0},
                                                      {0.1, 0.1, 0.2, 0.3, 0.3}}),
                                   2, {1, 2, 3}));
    traces[1].push_back(make_trace(Tensor::from_rows({{0.25, 0.25, 0.5, 0.0}, {0.0, 0.4, 0.3, 0.3}}), 2, {1, 2}));
    auto score = [](double m1, double m2, std::vector<double> in) {
        const double am = (m1 + m2) / 2.0;
        double s = 0.0;
        for (double v : in) s += v;
        const double ap = s / static_cast<double>(in.size());
        return am / (am + ap);
    };
    const double s00 = score(0.5, 0.3, {0.2}), s01 = score(0.2, 0.2, {0.3, 0.3}), s02 = score(0.1, 0.1, {0.2, 0.3, 0.3});
    const double s10 = score(0.25, 0.25, {0.5}), s11 = score(0.0, 0.4, {0.3, 0.3});
    auto p = profile_from_traces(traces);
    REQUIRE(p.size() == 3);
    CHECK(p[0].count == 2);
    CHECK(p[2].count == 1);
    CHECK(p[0].mean == (s00 + s10) / 2.0);
    CHECK(p[1].mean == (s01 + s11) / 2.0);
    CHECK(p[2].mean == s02);
    CHECK(p[0].stddev == doctest::Approx(std::abs(s00 - s10) / 2.0).epsilon(1e-14));
    CHECK(p[2].stddev == 0.0);

    const auto lines = split_lines(profile_csv(p));
    REQUIRE(lines.size() == 4);
    CHECK(lines[0] == "position,mean,std,count");

    std::vector<std::vector<AttentionTrace>> flat(3);
    for (auto& t : flat) t.push_back(make_trace(Tensor::matrix(4, 9, 1.0 / 9.0), 5));
    for (const auto& pt : profile_from_traces(flat)) CHECK(std::abs(pt.mean - 0.5) < 1e-15);

    std::vector<std::vector<AttentionTrace>> none(1);
    none[0].push_back(make_trace(Tensor::matrix(2, 2, 0.5), 0));
    CHECK_THROWS_AS(profile_from_traces(none), ContractError);
}

TEST_CASE("memory usage profile on a model") {
    TrainConfig c = grid_config();
    const ToyDataset ds = make_toy_dataset(c.data_config());
    TrainState s(c);
    train(s, ds.train, 6);
    REQUIRE(s.model.has_installed_memory());
    auto prof = memory_usage_profile(s.model, ds.val);
    std::size_t longest = 0;
    for (const auto& sample : ds.val) longest = std::max(longest, s.model.generate(sample.features, c.model.max_len).size());
    CHECK(prof.size() == longest);
    for (const auto& p : prof) {
        CHECK(p.mean >= 0.0);
        CHECK(p.mean <= 1.0);
    }
    CHECK(prof.front().count == ds.val.size());

    TrainConfig b = grid_config();
    apply_config_value(b, "mode", "baseline");
    TrainState plain(b);
    CHECK_THROWS_AS(memory_usage_profile(plain.model, ds.val), ContractError);
}

TEST_CASE("ablation grid") {
    const TrainConfig base = grid_config();
    const auto cells = standard_ablation_cells(base);
    CHECK(cells.size() == 7);
    std::vector<AblationCell> pick{cells[0], cells[1]};
    AblationOptions o;
    o.seeds = {1, 2};
    std::size_t seen = 0;
    o.on_row = [&](const AblationRow&) { ++seen; };
    auto rep = run_ablation_grid(base, pick, o);
    CHECK(rep.rows.size() == 4);
    CHECK(seen == 4);
    CHECK(rep.rows[0].cell == "pma");
    CHECK(rep.rows[3].cell == "baseline");
    CHECK(rep.rows[3].seed == 2);
    CHECK(rep.rows[0].refreshes > 0);
    CHECK(rep.rows[2].refreshes == 0);
    for (const auto& r : rep.rows) CHECK(r.config.size() == config_keys().size());

    CHECK(split_lines(rep.csv()).size() == 5);
    CHECK(split_lines(rep.jsonl()).size() == 4);
    for (const auto& line : split_lines(rep.jsonl())) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.contains("config"));
    }
    const std::string table = rep.summary_table();
    CHECK(table.find("pma") != std::string::npos);
    CHECK(table.find("baseline") != std::string::npos);

    // a grid cell is exactly one run
    TrainConfig direct = base;
    direct.seed = 2;
    apply_config_value(direct, "mode", "pma");
    AblationRow one = run_single(direct, "pma");
    CHECK(to_json(one.val) == to_json(rep.rows[1].val));
    CHECK(one.final_loss == rep.rows[1].final_loss);

    // the baseline cell equals a run that simply has no memory slots
    TrainConfig m0 = base;
    m0.seed = 1;
    apply_config_value(m0, "m", "0");
    AblationRow zero = run_single(m0, "m0");
    CHECK(to_json(zero.val) == to_json(rep.rows[2].val));
    CHECK(to_json(zero.compositional) == to_json(rep.rows[2].compositional));
    CHECK(zero.final_loss == rep.rows[2].final_loss);

    // worker count does not change results
    AblationOptions par = o;
    par.workers = 3;
    par.on_row = nullptr;
    CHECK(run_ablation_grid(base, pick, par).csv() == rep.csv());

    CHECK_THROWS_AS(run_ablation_grid(base, {}, o), ConfigError);
}

TEST_CASE("bench schema") {
    BenchOptions o;
    o.t_k = {4, 8};
    o.m = {0, 16};
    o.repeats = 5;
    auto rows = bench_attention(o);
    CHECK(rows.size() == 4);
    for (const auto& r : rows) {
        CHECK(r.median_us > 0.0);
        CHECK(r.p95_us >= r.median_us);
    }
    const auto lines = split_lines(bench_csv(rows));
    REQUIRE(lines.size() == 5);
    CHECK(lines[0] == "T_k,m,median_us,p95_us");
}

#include <doctest.h>

#include <filesystem>
#include <map>
#include <omp.h>
#include <set>

#include "fedgen/federation.hpp"
#include "fedgen/serialize.hpp"

using namespace fedgen;

namespace {

std::vector<ClientProfile> make_profiles(const std::vector<int>& tier_counts) {
    std::vector<ClientProfile> profiles;
    int cid = 0;
    for (std::size_t t = 0; t < tier_counts.size(); ++t) {
        for (int i = 0; i < tier_counts[t]; ++i) {
            profiles.push_back({cid++, static_cast<int>(t) + 1, {0}});
        }
    }
    return profiles;
}

ExperimentConfig tiny_config() {
    ExperimentConfig cfg;
    cfg.dataset.kind = "synth_blobs";
    cfg.dataset.per_class_train = 20;
    cfg.dataset.per_class_test = 10;
    cfg.dataset.side = 16;
    cfg.dataset.noise_sigma = 0.2;
    cfg.model.channels = {4, 6, 8};
    cfg.n_clients = 10;
    cfg.tier_counts = {4, 3, 3};
    cfg.rounds = 1;
    cfg.participation_fraction = 1.0;
    cfg.alpha = 10000.0;
    cfg.local.epochs = 1;
    cfg.local.lr = 0.005;
    cfg.local.batch_size = 16;
    cfg.hypernet.k = 8;
    cfg.hypernet.epochs = 2;
    cfg.hypernet.hidden_dim = 16;
    cfg.seed = 7;
    return cfg;
}

std::string scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "fedgen_fed" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

}  // namespace

TEST_SUITE_BEGIN("federation");

TEST_CASE("selection: 10 of 50 with tier counts {4,3,3} and a rotating extra") {
    auto profiles = make_profiles({17, 17, 16});
    std::map<int, int> first_round_counts;
    for (int round = 1; round <= 6; ++round) {
        auto sel = select_clients(profiles, 0.2, round, 9);
        CHECK(sel.size() == 10);
        std::map<int, int> by_tier;
        for (int id : sel) by_tier[profiles[static_cast<std::size_t>(id)].tier]++;
        std::multiset<int> counts;
        for (auto [tier, n] : by_tier) counts.insert(n);
        CHECK(counts == std::multiset<int>{3, 3, 4});
        if (round == 1) first_round_counts = by_tier;
        if (round == 2) CHECK(first_round_counts != by_tier);  // the 4 rotates
    }
}

TEST_CASE("selection determinism and full participation") {
    auto profiles = make_profiles({17, 17, 16});
    auto a = select_clients(profiles, 0.2, 5, 42);
    auto b = select_clients(profiles, 0.2, 5, 42);
    CHECK(a == b);
    auto c = select_clients(profiles, 0.2, 6, 42);
    CHECK(a != c);

    auto all = select_clients(profiles, 1.0, 1, 42);
    CHECK(all.size() == 50);
}

TEST_CASE("selection honors active tiers") {
    auto profiles = make_profiles({17, 17, 16});
    auto only3 = select_clients(profiles, 1.0, 1, 3, {3});
    CHECK(only3.size() == 16);
    for (int id : only3) CHECK(profiles[static_cast<std::size_t>(id)].tier == 3);

    auto fraction = select_clients(profiles, 0.25, 2, 3, {3});
    CHECK(fraction.size() == 4);
}

TEST_CASE("aggregate: identical updates reproduce the update; weighted mean is exact") {
    ParamSet global{{"s01.l00.conv_w", Tensor({1}, {0.0})}};
    std::vector<ClientUpdate> updates(2);
    updates[0] = {0, 1, 100, ParamSet{{"s01.l00.conv_w", Tensor({1}, {1.0})}}, {}};
    updates[1] = {1, 1, 300, ParamSet{{"s01.l00.conv_w", Tensor({1}, {5.0})}}, {}};
    auto result = aggregate(global, updates);
    CHECK(result.global.at("s01.l00.conv_w")[0] == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(result.contributors.at("s01.l00.conv_w") == 2);

    std::vector<ClientUpdate> same(3);
    for (int i = 0; i < 3; ++i) {
        same[static_cast<std::size_t>(i)] = {i, 1, 50,
                                             ParamSet{{"s01.l00.conv_w", Tensor({1}, {2.5})}},
                                             {}};
    }
    auto idem = aggregate(global, same);
    CHECK(idem.global.at("s01.l00.conv_w")[0] == 2.5);
}

TEST_CASE("aggregate: unowned layers keep the previous global value") {
    ParamSet global{{"s02.l00.conv_w", Tensor({2}, {7.0, -3.0})}};
    std::vector<ClientUpdate> updates(1);
    updates[0] = {0, 1, 10, ParamSet{}, ParamSet{}};
    auto result = aggregate(global, updates);
    CHECK(result.global.at("s02.l00.conv_w").vec() == std::vector<double>{7.0, -3.0});
    CHECK(result.contributors.at("s02.l00.conv_w") == 0);
}

TEST_CASE("aggregate: generated tensors contribute with the client weight") {
    ParamSet global{{"s02.l00.conv_w", Tensor({1}, {0.0})}};
    std::vector<ClientUpdate> updates(2);
    updates[0] = {0, 2, 100, ParamSet{{"s02.l00.conv_w", Tensor({1}, {2.0})}}, {}};
    updates[1] = {1, 1, 100, ParamSet{}, ParamSet{{"s02.l00.conv_w", Tensor({1}, {4.0})}}};
    auto result = aggregate(global, updates);
    CHECK(result.global.at("s02.l00.conv_w")[0] == doctest::Approx(3.0));
    CHECK(result.contributors.at("s02.l00.conv_w") == 2);
}

TEST_CASE("aggregate: elementwise convex hull and shape checks") {
    RngStream rs(3);
    ParamSet global{{"e01.fc_w", Tensor({3, 4})}};
    std::vector<ClientUpdate> updates(3);
    for (int i = 0; i < 3; ++i) {
        Tensor t({3, 4});
        for (auto& v : t.vec()) v = rs.uniform(-1, 1);
        updates[static_cast<std::size_t>(i)] = {i, 1, 10 + 5 * i, ParamSet{{"e01.fc_w", t}}, {}};
    }
    auto result = aggregate(global, updates);
    const Tensor& agg = result.global.at("e01.fc_w");
    for (std::int64_t i = 0; i < agg.size(); ++i) {
        double lo = 1e300, hi = -1e300;
        for (const auto& u : updates) {
            lo = std::min(lo, u.params.at("e01.fc_w")[i]);
            hi = std::max(hi, u.params.at("e01.fc_w")[i]);
        }
        CHECK(agg[i] >= lo - 1e-12);
        CHECK(agg[i] <= hi + 1e-12);
    }

    std::vector<ClientUpdate> bad(1);
    bad[0] = {0, 1, 10, ParamSet{{"e01.fc_w", Tensor({2, 2})}}, {}};
    CHECK_THROWS_WITH_AS(aggregate(global, bad), doctest::Contains("e01.fc_w"),
                         std::invalid_argument);
}

TEST_CASE("config validation reports the offending field") {
    auto cfg = tiny_config();
    cfg.tier_counts = {4, 3, 2};
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("tier_counts"), ConfigError);

    auto cfg2 = tiny_config();
    cfg2.participation_fraction = 0.0;
    CHECK_THROWS_WITH_AS(cfg2.validate(), doctest::Contains("participation_fraction"), ConfigError);

    auto cfg3 = tiny_config();
    cfg3.tier_counts = {5, 5};  // two tiers for a three-exit model
    cfg3.n_clients = 10;
    CHECK_THROWS_WITH_AS(cfg3.validate(), doctest::Contains("tier_counts"), ConfigError);
}

TEST_CASE("config JSON roundtrip preserves every field") {
    auto cfg = tiny_config();
    cfg.active_tiers = {1, 3};
    cfg.eval.cka = true;
    auto j = cfg.to_json();
    auto back = ExperimentConfig::from_json(nlohmann::json::parse(j.dump()));
    CHECK(back.to_json().dump() == j.dump());
}

TEST_CASE("one round: disparity accounting with and without the hypernetwork") {
    auto cfg = tiny_config();
    auto [train, test] = datasets_from_config(cfg);

    {
        ExperimentConfig on = cfg;
        on.hypernet.enabled = true;
        Federation fed(on, train, test);
        auto report = fed.run_round(1);
        CHECK(report.conv_contributors_per_segment == std::vector<int>{10, 10, 10});
        CHECK(report.generated_tensors > 0);
        REQUIRE(report.generation_mae.has_value());
        CHECK(*report.generation_mae > 0.0);
    }
    {
        ExperimentConfig off = cfg;
        off.hypernet.enabled = false;
        Federation fed(off, train, test);
        auto report = fed.run_round(1);
        CHECK(report.conv_contributors_per_segment == std::vector<int>{10, 6, 3});
        CHECK(report.generated_tensors == 0);
        CHECK(!report.generation_mae.has_value());
    }
}

TEST_CASE("tier restriction law: clients only return keys their tier owns") {
    auto cfg = tiny_config();
    auto [train, test] = datasets_from_config(cfg);
    Federation fed(cfg, train, test);
    fed.run_round(1);
    const auto reference = build_model(fed.spec(), 0);
    for (const auto& [client_id, params] : fed.last_local_params()) {
        const int tier = fed.profiles()[static_cast<std::size_t>(client_id)].tier;
        const auto expected = subnetwork(reference, tier, cfg.multi_exit);
        REQUIRE(params.size() == expected.size());
        for (const auto& [key, tensor] : expected) CHECK(params.count(key) == 1);
    }
}

TEST_CASE("round report carries accuracy for every exit and hypernet losses") {
    auto cfg = tiny_config();
    cfg.eval.cka = true;
    cfg.eval.cka_probe = 32;
    auto [train, test] = datasets_from_config(cfg);
    Federation fed(cfg, train, test);
    auto report = fed.run_round(1);
    CHECK(report.exit_accuracy.size() == 3);
    for (double a : report.exit_accuracy) {
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
    }
    CHECK(report.hypernet_loss.size() == 2);
    CHECK(report.hypernet_loss[0].has_value());  // tier-2/3 clients fed H1->2
    CHECK(report.selected.size() == 10);
    CHECK(report.cka_t1_t3.has_value());
    const auto j = report.to_json();
    CHECK(j.contains("exit_accuracy"));
    CHECK(j.contains("conv_contributors"));
}

TEST_CASE("multi-exit off: heads are owned only by their own tier") {
    auto cfg = tiny_config();
    cfg.multi_exit = false;
    cfg.hypernet.enabled = false;
    auto [train, test] = datasets_from_config(cfg);
    Federation fed(cfg, train, test);
    fed.run_round(1);
    for (const auto& [client_id, params] : fed.last_local_params()) {
        const int tier = fed.profiles()[static_cast<std::size_t>(client_id)].tier;
        int heads = 0;
        for (const auto& [key, tensor] : params) {
            const auto info = parse_key(key);
            if (info.is_exit) {
                ++heads;
                CHECK(info.segment == tier);
            }
        }
        CHECK(heads == 2);  // fc_w and fc_b of the single head
    }
}

TEST_CASE("run_experiment: rounds=0 writes an initialization checkpoint and empty reports") {
    auto cfg = tiny_config();
    cfg.rounds = 0;
    const auto dir = scratch("rounds0");
    auto summary = run_experiment(cfg, dir);
    CHECK(summary.rounds_completed == 0);
    CHECK(io::read_file(dir + "/reports.jsonl").empty());
    auto params = io::load_params(dir + "/checkpoint_final");
    CHECK(params.size() == build_model(model_from_config(cfg), 0).size());
    CHECK(std::filesystem::exists(dir + "/manifest.json"));
    CHECK(std::filesystem::exists(dir + "/partition.json"));
}

TEST_CASE("run_experiment is byte-deterministic regardless of thread count") {
    auto cfg = tiny_config();
    cfg.rounds = 3;
    const auto dir1 = scratch("det1");
    const auto dir2 = scratch("det2");

    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    run_experiment(cfg, dir1);
    omp_set_num_threads(3);
    run_experiment(cfg, dir2);
    omp_set_num_threads(saved);

    CHECK(io::read_file(dir1 + "/reports.jsonl") == io::read_file(dir2 + "/reports.jsonl"));
    CHECK(io::read_file(dir1 + "/reports.jsonl").size() > 0);
    CHECK(io::read_file(dir1 + "/checkpoint_final.bin") ==
          io::read_file(dir2 + "/checkpoint_final.bin"));
}

TEST_SUITE_END();

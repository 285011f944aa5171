#include <doctest.h>

#include <cmath>

#include "fedgen/data.hpp"
#include "fedgen/metrics.hpp"
#include "fedgen/multiexit.hpp"
#include "fedgen/rng.hpp"

using namespace fedgen;
using metrics::FeatureMatrix;

namespace {

FeatureMatrix random_features(std::int64_t n, std::int64_t d, std::uint64_t seed) {
    RngStream rs(seed);
    FeatureMatrix f;
    f.m = Tensor({n, d});
    for (auto& v : f.m.vec()) v = rs.normal();
    return f;
}

// Naive double-loop oracle straight from the definition on centered features.
double cka_oracle(FeatureMatrix x, FeatureMatrix y) {
    x.center();
    y.center();
    const std::int64_t n = x.m.dim(0), dx = x.m.dim(1), dy = y.m.dim(1);
    double cross = 0.0, xx = 0.0, yy = 0.0;
    for (std::int64_t a = 0; a < dy; ++a) {
        for (std::int64_t b = 0; b < dx; ++b) {
            double dot = 0.0;
            for (std::int64_t i = 0; i < n; ++i) dot += y.m(i, a) * x.m(i, b);
            cross += dot * dot;
        }
    }
    for (std::int64_t a = 0; a < dx; ++a) {
        for (std::int64_t b = 0; b < dx; ++b) {
            double dot = 0.0;
            for (std::int64_t i = 0; i < n; ++i) dot += x.m(i, a) * x.m(i, b);
            xx += dot * dot;
        }
    }
    for (std::int64_t a = 0; a < dy; ++a) {
        for (std::int64_t b = 0; b < dy; ++b) {
            double dot = 0.0;
            for (std::int64_t i = 0; i < n; ++i) dot += y.m(i, a) * y.m(i, b);
            yy += dot * dot;
        }
    }
    const double denom = std::sqrt(xx) * std::sqrt(yy);
    return denom > 0 ? cross / denom : 0.0;
}

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("CKA self-similarity is 1") {
    auto x = random_features(64, 9, 1);
    CHECK(metrics::linear_cka(x, x) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("CKA is invariant to orthogonal rotation and nonzero scaling") {
    auto x = random_features(48, 6, 2);
    // rotate by a product of Givens rotations
    FeatureMatrix y = x;
    RngStream rs(3);
    for (int rot = 0; rot < 8; ++rot) {
        const std::int64_t a = rs.uniform_int(0, 5);
        std::int64_t b = rs.uniform_int(0, 5);
        if (a == b) b = (b + 1) % 6;
        const double theta = rs.uniform(0, 6.28);
        const double c = std::cos(theta), s = std::sin(theta);
        for (std::int64_t i = 0; i < y.m.dim(0); ++i) {
            const double va = y.m(i, a), vb = y.m(i, b);
            y.m(i, a) = c * va - s * vb;
            y.m(i, b) = s * va + c * vb;
        }
    }
    CHECK(metrics::linear_cka(x, y) == doctest::Approx(1.0).epsilon(1e-10));

    FeatureMatrix scaled = x;
    for (auto& v : scaled.m.vec()) v *= -3.7;
    CHECK(metrics::linear_cka(x, scaled) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("CKA of independent gaussians is small and matches the naive oracle") {
    auto x = random_features(1000, 16, 4);
    auto y = random_features(1000, 16, 5);
    const double cka = metrics::linear_cka(x, y);
    CHECK(cka < 0.1);
    CHECK(cka == doctest::Approx(cka_oracle(x, y)).epsilon(1e-9));
}

TEST_CASE("CKA is symmetric and bounded") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto x = random_features(40, 7, 100 + seed);
        auto y = random_features(40, 11, 200 + seed);
        const double a = metrics::linear_cka(x, y);
        const double b = metrics::linear_cka(y, x);
        CHECK(std::abs(a - b) <= 1e-12);
        CHECK(a >= 0.0);
        CHECK(a <= 1.0 + 1e-12);
    }
}

TEST_CASE("CKA rejects mismatched row counts and degenerate input returns 0") {
    auto x = random_features(10, 3, 6);
    auto y = random_features(12, 3, 7);
    CHECK_THROWS_AS(metrics::linear_cka(x, y), std::invalid_argument);

    FeatureMatrix zero;
    zero.m = Tensor({10, 3});
    CHECK(metrics::linear_cka(zero, zero) == 0.0);
}

TEST_CASE("weight MAE: zero for identical sets, exact for constant shifts") {
    auto spec = ModelSpec::conv_blocks({4, 6}, 10, 1, 16);
    auto a = build_model(spec, 1);
    auto same = metrics::weight_mae(a, a, false);
    for (const auto& [key, v] : same) CHECK(v == 0.0);

    auto b = a;
    for (auto& [key, tensor] : b) {
        for (auto& v : tensor.vec()) v += 0.5;
    }
    auto shifted = metrics::weight_mae(a, b, false);
    for (const auto& [key, v] : shifted) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("normalized weight MAE is invariant to common scaling") {
    auto spec = ModelSpec::conv_blocks({4, 6}, 10, 1, 16);
    auto a = build_model(spec, 2);
    auto b = build_model(spec, 3);
    auto base = metrics::weight_mae(a, b, true);
    auto a10 = a;
    auto b10 = b;
    for (auto& [key, tensor] : a10) {
        for (auto& v : tensor.vec()) v *= 10.0;
    }
    for (auto& [key, tensor] : b10) {
        for (auto& v : tensor.vec()) v *= 10.0;
    }
    auto scaled = metrics::weight_mae(a10, b10, true);
    for (const auto& [key, v] : base) {
        CHECK(scaled.at(key) == doctest::Approx(v).epsilon(1e-9));
    }
}

TEST_CASE("weight MAE lists missing keys") {
    auto spec = ModelSpec::conv_blocks({4, 6}, 10, 1, 16);
    auto a = build_model(spec, 4);
    auto b = subnetwork(a, 1);
    CHECK_THROWS_WITH_AS(metrics::weight_mae(a, b, false), doctest::Contains("s02"),
                         std::invalid_argument);
}

TEST_CASE("hypernet footprint matches brute-force parameter enumeration") {
    auto spec = ModelSpec::conv_blocks({4, 6, 8}, 10, 1, 16);
    auto bank = HyperNetBank::build(spec, 4, 32, false, 5);
    auto fp = metrics::hypernet_footprint(bank);

    std::int64_t brute = 0;
    for (int t = 1; t <= bank.count(); ++t) {
        for (const auto& [key, tensor] : bank.net(t).weights()) brute += tensor.size();
    }
    CHECK(fp.param_count == brute);
    CHECK(fp.bytes == brute * 8);

    // analytic counting agrees with the instantiated bank
    CHECK(metrics::analytic_hypernet_footprint(spec, 4, 32).param_count == brute);

    // same check with the ablation targets enabled
    auto bank_bnfc = HyperNetBank::build(spec, 4, 32, true, 5);
    std::int64_t brute_bnfc = 0;
    for (int t = 1; t <= bank_bnfc.count(); ++t) {
        for (const auto& [key, tensor] : bank_bnfc.net(t).weights()) brute_bnfc += tensor.size();
    }
    CHECK(metrics::analytic_hypernet_footprint(spec, 4, 32, true).param_count == brute_bnfc);
}

TEST_CASE("footprint grows strictly with hidden width; bytes follow precision") {
    auto spec = compression_reference_spec();
    const auto narrow = metrics::analytic_hypernet_footprint(spec, 25, 256);
    const auto wide = metrics::analytic_hypernet_footprint(spec, 25, 512);
    CHECK(wide.param_count > narrow.param_count);
    CHECK(narrow.bytes == narrow.param_count * 8);
    CHECK(metrics::analytic_hypernet_footprint(spec, 25, 256, false, 4).bytes ==
          narrow.param_count * 4);
}

TEST_CASE("compression accounting on the reference spec meets the ratio bounds") {
    auto spec = compression_reference_spec();
    const auto k25 = metrics::analytic_hypernet_footprint(spec, 25, 256);
    std::int64_t full_rank = 1 << 30;  // large k clamps to min(r, c) per layer
    const auto full = metrics::analytic_hypernet_footprint(spec, full_rank, 256);
    const double param_ratio =
        static_cast<double>(k25.param_count) / static_cast<double>(full.param_count);
    const double size_ratio = static_cast<double>(k25.bytes) / static_cast<double>(full.bytes);
    CHECK(param_ratio <= 0.013);
    CHECK(size_ratio <= 0.02);
    CHECK(full.param_count >= 50 * k25.param_count);

    // on the small default backbone the direction still holds
    auto small = ModelSpec::conv_blocks({16, 32, 64}, 10, 1, 28);
    CHECK(metrics::analytic_hypernet_footprint(small, 25, 256).param_count <
          metrics::analytic_hypernet_footprint(small, full_rank, 256).param_count);
}

TEST_CASE("accuracy: chance level for a fresh model, 1.0 after memorization") {
    auto spec = ModelSpec::conv_blocks({8, 16}, 10, 1, 16);
    Dataset data = synth_blobs(10, 40, 16, 0.1, 31);
    auto params = build_model(spec, 6);

    const double chance = metrics::accuracy(spec, params, 2, 2, data);
    CHECK(chance > 0.10 - 0.03);
    CHECK(chance < 0.10 + 0.03);
    CHECK(metrics::accuracy(spec, params, 2, 2, data) == chance);  // deterministic

    std::vector<std::int64_t> shard{0, 40, 80, 120, 160, 200, 240, 280, 320, 360};
    LocalHp hp;
    hp.epochs = 120;
    hp.lr = 0.01;
    hp.batch_size = 10;
    hp.seed = 3;
    auto [trained, stats] = local_train(spec, params, 2, data, shard, hp);
    CHECK(metrics::accuracy(spec, trained, 2, 2, data, shard) == 1.0);
}

TEST_SUITE_END();

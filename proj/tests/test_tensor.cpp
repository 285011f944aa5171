#include <doctest.h>

#include <cmath>

#include "fedgen/loss.hpp"
#include "fedgen/optimizer.hpp"
#include "fedgen/rng.hpp"
#include "fedgen/tensor.hpp"

using namespace fedgen;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("shape and data invariants") {
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.all_finite());
    CHECK_THROWS_AS(Tensor({2, 0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
    t(1, 2) = 5.0;
    CHECK(t[5] == 5.0);
    CHECK_THROWS_AS(t.reshaped({4, 2}), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one") {
    RngStream rs(7);
    Tensor logits({16, 10});
    for (auto& v : logits.vec()) v = rs.uniform(-8.0, 8.0);
    Tensor p = softmax(logits);
    for (std::int64_t n = 0; n < 16; ++n) {
        double s = 0.0;
        for (std::int64_t c = 0; c < 10; ++c) s += p(n, c);
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("cross entropy of uniform logits is ln(C)") {
    Tensor logits = Tensor::full({4, 10}, 0.37);
    auto ce = cross_entropy(logits, {0, 3, 5, 9});
    CHECK(std::abs(ce.loss - std::log(10.0)) < 1e-9);
}

TEST_CASE("cross entropy saturates for a dominant correct logit") {
    Tensor logits({1, 10});
    logits.fill(0.0);
    logits(0, 4) = 30.0;
    auto ce = cross_entropy(logits, {4});
    CHECK(ce.loss < 1e-9);
    CHECK(ce.loss >= 0.0);
}

TEST_CASE("cross entropy hand value for logits [1, 2], label 1") {
    Tensor logits({1, 2}, {1.0, 2.0});
    auto ce = cross_entropy(logits, {1});
    CHECK(std::abs(ce.loss - 0.3132616875182228) < 1e-12);
}

TEST_CASE("cross entropy rejects out-of-range labels") {
    Tensor logits({1, 3});
    CHECK_THROWS_AS(cross_entropy(logits, {3}), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy(logits, {-1}), std::out_of_range);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ParamSet params{{"w", Tensor({3}, {1.0, -2.0, 0.5})}};
    ParamSet grads{{"w", Tensor({3})}};
    AdamState state;
    adam_step(params, grads, state);
    CHECK(params.at("w")[0] == 1.0);
    CHECK(params.at("w")[1] == -2.0);
    CHECK(params.at("w")[2] == 0.5);
    CHECK(state.step_count == 1);
}

TEST_CASE("adam: first-step hand calculation") {
    // theta=0, g=1, lr=1e-3: bias-corrected mhat = vhat = 1, step = -lr/(1+eps)
    ParamSet params{{"w", Tensor({1})}};
    ParamSet grads{{"w", Tensor({1}, {1.0})}};
    AdamState state;
    adam_step(params, grads, state);
    CHECK(std::abs(params.at("w")[0] + 0.001) < 1e-9);
}

TEST_CASE("adam: repeated identical gradients move against the gradient sign") {
    ParamSet params{{"w", Tensor({1})}};
    ParamSet grads{{"w", Tensor({1}, {2.5})}};
    AdamState state;
    double prev = 0.0;
    for (int i = 0; i < 2; ++i) {
        adam_step(params, grads, state);
        CHECK(params.at("w")[0] < prev);
        prev = params.at("w")[0];
    }
}

TEST_CASE("adam: lr=0 is a bit-identical no-op on parameters") {
    RngStream rs(3);
    ParamSet params{{"w", Tensor({8})}};
    ParamSet grads{{"w", Tensor({8})}};
    for (auto& v : params.at("w").vec()) v = rs.normal();
    for (auto& v : grads.at("w").vec()) v = rs.normal();
    const auto before = params.at("w").vec();
    AdamState state;
    state.config.learning_rate = 0.0;
    adam_step(params, grads, state);
    CHECK(params.at("w").vec() == before);
}

TEST_CASE("adam: shape mismatch is an error") {
    ParamSet params{{"w", Tensor({2})}};
    ParamSet grads{{"w", Tensor({3})}};
    AdamState state;
    CHECK_THROWS_AS(adam_step(params, grads, state), std::invalid_argument);
}

TEST_CASE("rng streams are deterministic and purpose-separated") {
    SeedTree tree(42);
    RngStream a = tree.stream("x", 1, 2);
    RngStream b = tree.stream("x", 1, 2);
    RngStream c = tree.stream("y", 1, 2);
    CHECK(a.next_u64() == b.next_u64());
    CHECK(a.next_u64() == b.next_u64());
    RngStream a2 = tree.stream("x", 1, 2);
    CHECK(a2.next_u64() != c.next_u64());
}

TEST_CASE("rng gamma moments are roughly right") {
    RngStream rs(11);
    for (double alpha : {0.1, 0.5, 2.0, 10.0}) {
        double sum = 0.0;
        const int n = 20000;
        for (int i = 0; i < n; ++i) sum += rs.gamma(alpha);
        const double mean = sum / n;
        CHECK(std::abs(mean - alpha) < 0.12 * std::max(1.0, alpha));
    }
}

TEST_SUITE_END();

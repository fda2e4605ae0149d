#include "smoe/routing.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

using namespace smoe;

TEST_CASE("dense gate basics") {
    RouterState router;
    router.w = Matrix::Zero(5, 4);
    Vector x = Vector::Ones(5);
    Vector probs = dense_gate(router, x);
    for (Index i = 0; i < 4; ++i) REQUIRE(probs(i) == Catch::Approx(0.25).margin(1e-12));

    Vector z(2);
    z << std::log(2.0), 0.0;
    Vector p = softmax(z);
    REQUIRE(p(0) == Catch::Approx(2.0 / 3.0).margin(1e-12));
    REQUIRE(p(1) == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("softmax shift invariance") {
    Rng rng = make_rng(1);
    Vector z = gaussian_vector(6, rng);
    Vector shifted = z.array() + 13.7;
    REQUIRE((softmax(z) - softmax(shifted)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("dense gate rejects dimension mismatch") {
    RouterState router;
    router.w = Matrix::Zero(5, 4);
    REQUIRE_THROWS_AS(dense_gate(router, Vector::Ones(4)), InvalidInput);
}

TEST_CASE("topk gate hand example") {
    Vector z(4);
    z << 3.0, 1.0, 2.0, 0.0;
    GateOutput g = topk_gate_from_logits(z, GateConfig{4, 2, 0.0});
    REQUIRE(g.selected == std::vector<Index>{0, 2});
    const double e = std::exp(1.0);
    REQUIRE(g.weights(0) == Catch::Approx(e / (e + 1.0)).margin(1e-12));
    REQUIRE(g.weights(2) == Catch::Approx(1.0 / (e + 1.0)).margin(1e-12));
    REQUIRE(g.weights(1) == 0.0);
    REQUIRE(g.weights(3) == 0.0);
}

TEST_CASE("topk with k equal to N matches dense gate") {
    Rng rng = make_rng(2);
    RouterState router;
    router.w = gaussian_matrix(7, 5, rng);
    Vector x = gaussian_vector(7, rng);
    GateOutput g = topk_gate(router, x, GateConfig{5, 5, 0.0});
    Vector dense = dense_gate(router, x);
    REQUIRE((g.weights - dense).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("equal logits break ties toward lower index") {
    Vector z = Vector::Zero(8);
    GateOutput g = topk_gate_from_logits(z, GateConfig{8, 2, 0.0});
    REQUIRE(g.selected == std::vector<Index>{0, 1});
    REQUIRE(g.weights(0) == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(g.weights(1) == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("topk support matches a sort oracle and weights normalize") {
    Rng rng = make_rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const Index n = 2 + static_cast<Index>(trial % 7);
        const Index k = 1 + static_cast<Index>(trial % n);
        Vector z = gaussian_vector(n, rng);
        GateOutput g = topk_gate_from_logits(z, GateConfig{n, k, 0.0});

        std::vector<Index> oracle(static_cast<std::size_t>(n));
        std::iota(oracle.begin(), oracle.end(), Index{0});
        std::sort(oracle.begin(), oracle.end(), [&](Index a, Index b) {
            if (z(a) != z(b)) return z(a) > z(b);
            return a < b;
        });
        oracle.resize(static_cast<std::size_t>(k));
        REQUIRE(g.selected == oracle);

        double total = 0.0;
        Index nonzero = 0;
        for (Index i = 0; i < n; ++i) {
            if (g.weights(i) > 0.0) ++nonzero;
            total += g.weights(i);
        }
        REQUIRE(nonzero == k);
        REQUIRE(total == Catch::Approx(1.0).margin(1e-12));

        // every selected logit beats every unselected one under tie-break order
        for (Index i : g.selected)
            for (Index j = 0; j < n; ++j) {
                if (std::find(g.selected.begin(), g.selected.end(), j) != g.selected.end())
                    continue;
                REQUIRE((z(i) > z(j) || (z(i) == z(j) && i < j)));
            }
    }
}

TEST_CASE("balance loss values") {
    const GateConfig gate{4, 1, 0.0};
    SECTION("uniform routing gives 1") {
        std::vector<Index> counts{2, 2, 2, 2};
        Vector probs = Vector::Constant(4, 0.25);
        REQUIRE(balance_loss(counts, probs, gate, 8) == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("collapse gives N") {
        std::vector<Index> counts{8, 0, 0, 0};
        Vector probs = Vector::Zero(4);
        probs(0) = 1.0;
        REQUIRE(balance_loss(counts, probs, gate, 8) == Catch::Approx(4.0).margin(1e-12));
    }
    SECTION("input validation") {
        std::vector<Index> counts{1, 1, 1, 1};
        Vector probs = Vector::Constant(4, 0.25);
        REQUIRE_THROWS_AS(balance_loss(counts, probs, gate, 0), InvalidInput);
        REQUIRE_THROWS_AS(balance_loss(counts, probs, gate, 8), InvalidInput);  // counts != k*T
    }
}

TEST_CASE("balance loss matches a per-token accumulation oracle") {
    Rng rng = make_rng(5);
    const GateConfig gate{6, 2, 0.0};
    const Index tokens = 64;
    std::vector<Index> counts(6, 0);
    Vector probs_sum = Vector::Zero(6);
    std::vector<GateOutput> outs;
    for (Index t = 0; t < tokens; ++t) {
        Vector z = gaussian_vector(6, rng);
        GateOutput g = topk_gate_from_logits(z, gate);
        for (Index i : g.selected) counts[static_cast<std::size_t>(i)] += 1;
        probs_sum += g.dense_probs;
        outs.push_back(std::move(g));
    }
    const double lib = balance_loss(counts, probs_sum / tokens, gate, tokens);
    // oracle: accumulate f_i P_i one token at a time, entirely independently
    double oracle = 0.0;
    for (Index i = 0; i < 6; ++i) {
        double f = 0.0, p = 0.0;
        for (const GateOutput& g : outs) {
            const bool assigned =
                std::find(g.selected.begin(), g.selected.end(), i) != g.selected.end();
            f += assigned ? 6.0 / (2.0 * tokens) : 0.0;
            p += g.dense_probs(i) / tokens;
        }
        oracle += f * p;
    }
    REQUIRE(lib == Catch::Approx(oracle).margin(1e-12));
}

TEST_CASE("balance loss exceeds 1 under skew") {
    const GateConfig gate{4, 1, 0.0};
    std::vector<Index> counts{5, 1, 1, 1};
    Vector probs(4);
    probs << 0.55, 0.15, 0.15, 0.15;
    REQUIRE(balance_loss(counts, probs, gate, 8) > 1.0);
}

TEST_CASE("theoretical moments") {
    auto [mean, var] = theoretical_moments(8, 2);
    REQUIRE(mean == Catch::Approx(0.125).margin(1e-15));
    REQUIRE(var == Catch::Approx(6.0 / 128.0).margin(1e-15));
    auto [mean_dense, var_dense] = theoretical_moments(5, 5);
    REQUIRE(mean_dense == Catch::Approx(0.2).margin(1e-15));
    REQUIRE(var_dense == 0.0);
    REQUIRE_THROWS_AS(theoretical_moments(4, 5), InvalidInput);
}

TEST_CASE("estimated moments approach theory") {
    const GateConfig gate{8, 2, 0.0};
    const Index samples = 200000;
    SECTION("mean identity under unit Gaussian logits") {
        MomentEstimate est = estimate_moments(gate, gaussian_logits(1.0), samples, 17);
        // 4 sigma-hat / sqrt(samples) per-expert bound
        for (Index i = 0; i < 8; ++i) {
            const double se = std::sqrt(est.variance(i) / samples);
            REQUIRE(std::abs(est.mean(i) - 0.125) <= 4.0 * se);
        }
    }
    SECTION("variance formula in the vanishing-spread limit") {
        MomentEstimate est = estimate_moments(gate, gaussian_logits(1e-6), samples, 18);
        for (Index i = 0; i < 8; ++i)
            REQUIRE(est.variance(i) == Catch::Approx(0.046875).margin(2e-3));
    }
    SECTION("variance lower bound for spread logits") {
        MomentEstimate est = estimate_moments(gate, gaussian_logits(1.0), samples, 19);
        for (Index i = 0; i < 8; ++i) REQUIRE(est.variance(i) >= 0.046875 - 2e-3);
    }
    SECTION("dense gating with two experts has near-zero variance") {
        MomentEstimate est = estimate_moments(GateConfig{2, 2, 0.0}, gaussian_logits(1e-6), 10000, 20);
        REQUIRE(est.variance.maxCoeff() <= 1e-12);
    }
}

TEST_CASE("estimate_moments is deterministic given the seed") {
    const GateConfig gate{4, 2, 0.0};
    MomentEstimate a = estimate_moments(gate, gaussian_logits(1.0), 1000, 99);
    MomentEstimate b = estimate_moments(gate, gaussian_logits(1.0), 1000, 99);
    REQUIRE((a.mean - b.mean).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE_THROWS_AS(estimate_moments(gate, gaussian_logits(1.0), 0, 1), InvalidInput);
}

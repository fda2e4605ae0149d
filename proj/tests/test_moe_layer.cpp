#include "smoe/moe_layer.hpp"

#include "smoe/oracles.hpp"
#include "smoe/verify.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <sstream>

using namespace smoe;

namespace {

LayerConfig small_config(Index n_experts = 4, Index top_k = 2) {
    LayerConfig lc;
    lc.m = 16;
    lc.n = 12;
    lc.total_rank = n_experts * 2;
    lc.n_experts = n_experts;
    lc.top_k = top_k;
    lc.scale = ScaleSpec::fixed(4.0);
    lc.rho = 10.0;
    lc.scheme = SegmentScheme::principal();
    return lc;
}

}  // namespace

TEST_CASE("optimal scale formula") {
    REQUIRE(optimal_scale(12, 4, 1.0) == Catch::Approx(3.0).margin(1e-12));  // n = 3r
    REQUIRE(optimal_scale(4096, 32, 0.1) == Catch::Approx(std::sqrt(38.4)).margin(1e-9));
    double prev = 0.0;
    for (Index n : {64, 256, 1024, 4096}) {
        const double s = optimal_scale(n, 16, 1.0);
        REQUIRE(s > prev);
        prev = s;
    }
    REQUIRE_THROWS_AS(optimal_scale(0, 4, 1.0), InvalidInput);
    REQUIRE_THROWS_AS(optimal_scale(8, 4, 0.0), InvalidInput);
}

TEST_CASE("expert aligned scales") {
    SECTION("direct substitution") {
        auto scales = expert_aligned_scales({4.0, 1.0}, 2.0);
        REQUIRE(scales[0] == Catch::Approx(2.0));
        REQUIRE(scales[1] == Catch::Approx(4.0));
    }
    SECTION("equal masses give equal scales") {
        auto scales = expert_aligned_scales({3.0, 3.0, 3.0}, 1.5);
        for (double s : scales) REQUIRE(s == Catch::Approx(1.5));
    }
    SECTION("defining identity holds") {
        std::vector<double> masses{5.0, 2.5, 1.25, 0.7};
        auto scales = expert_aligned_scales(masses, 2.0);
        for (std::size_t i = 0; i < masses.size(); ++i)
            REQUIRE(scales[i] * scales[i] * masses[i] ==
                    Catch::Approx(scales[0] * scales[0] * masses[0]).epsilon(1e-12));
    }
    SECTION("degenerate mass rejected") {
        REQUIRE_THROWS_AS(expert_aligned_scales({1.0, 0.0}, 1.0), DegenerateSegment);
    }
}

TEST_CASE("single-expert layer reproduces the base weight exactly") {
    Rng rng = make_rng(31);
    Matrix w0 = gaussian_matrix(10, 8, rng);
    LayerConfig lc;
    lc.m = 10;
    lc.n = 8;
    lc.total_rank = 4;
    lc.n_experts = 1;
    lc.top_k = 1;
    lc.scale = ScaleSpec::fixed(3.0);
    lc.rho = 1.0;
    SpectralMoeLayer layer = init_layer(w0, lc, 5);
    for (int t = 0; t < 5; ++t) {
        Vector x = gaussian_vector(8, rng);
        REQUIRE(relative_l2_error(forward(layer, x).y, Vector(w0 * x)) <= 1e-12);
        REQUIRE(relative_frobenius_error(equivalent_weight(layer, x), w0) <= 1e-12);
    }
}

TEST_CASE("zero-init layer starts at the base weight") {
    Rng rng = make_rng(32);
    Matrix w0 = gaussian_matrix(12, 12, rng);
    LayerConfig lc = small_config();
    lc.m = 12;
    lc.n = 12;
    lc.spectral_init = false;
    SpectralMoeLayer layer = init_layer(w0, lc, 6);
    REQUIRE(layer.residual.cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((layer.base - w0).cwiseAbs().maxCoeff() == 0.0);
    Vector x = gaussian_vector(12, rng);
    REQUIRE(relative_l2_error(forward(layer, x).y, Vector(w0 * x)) <= 1e-14);
}

TEST_CASE("frozen base plus residual reconstructs the original weight") {
    Rng rng = make_rng(33);
    Matrix w0 = gaussian_matrix(16, 12, rng);
    LayerConfig lc = small_config();
    SpectralMoeLayer layer = init_layer(w0, lc, 7);
    REQUIRE(relative_frobenius_error(layer.original_weight(), w0) <= 1e-12);
    REQUIRE(relative_frobenius_error(equivalent_weight_expected(layer), w0) <= 1e-12);
}

TEST_CASE("forward matches a materialized-weight oracle") {
    Rng rng = make_rng(34);
    Matrix w0 = gaussian_matrix(16, 12, rng);
    for (bool per_expert : {false, true}) {
        LayerConfig lc = small_config();
        lc.per_expert_scaling = per_expert;
        SpectralMoeLayer layer = init_layer(w0, lc, 8);
        for (int t = 0; t < 10; ++t) {
            Vector x = gaussian_vector(12, rng);
            Vector via_weight = equivalent_weight(layer, x) * x;
            REQUIRE(relative_l2_error(forward(layer, x).y, via_weight) <= 1e-10);
        }
    }
}

TEST_CASE("forward of zero input is zero") {
    Rng rng = make_rng(35);
    Matrix w0 = gaussian_matrix(16, 12, rng);
    SpectralMoeLayer layer = init_layer(w0, small_config(), 9);
    REQUIRE(forward(layer, Vector::Zero(12)).y.cwiseAbs().maxCoeff() == 0.0);
    REQUIRE_THROWS_AS(forward(layer, Vector::Zero(5)), InvalidInput);
}

TEST_CASE("backward gradients match finite differences on small layers") {
    GradientCheckSummary s = run_gradient_checks(2024);
    REQUIRE(s.cases >= 20);
    REQUIRE(s.max_rel_error <= 1e-5);
    REQUIRE(s.max_unselected == 0.0);
}

TEST_CASE("single dense expert reduces to plain LoRA gradients") {
    Rng rng = make_rng(36);
    Matrix w0 = gaussian_matrix(10, 8, rng);
    LayerConfig lc;
    lc.m = 10;
    lc.n = 8;
    lc.total_rank = 3;
    lc.n_experts = 1;
    lc.top_k = 1;
    lc.scale = ScaleSpec::fixed(5.0);
    lc.rho = 1.0;
    SpectralMoeLayer layer = init_layer(w0, lc, 10);
    Vector x = gaussian_vector(8, rng);
    Vector upstream = gaussian_vector(10, rng);
    LayerGradients g = backward(layer, x, upstream, false);
    const ExpertAdapter& e = layer.experts[0];
    Matrix g_full = upstream * x.transpose();
    REQUIRE(relative_frobenius_error(g.grad_b[0], 5.0 * g_full * e.a.transpose()) <= 1e-12);
    REQUIRE(relative_frobenius_error(g.grad_a[0], 5.0 * e.b.transpose() * g_full) <= 1e-12);
}

TEST_CASE("equivalent gradient surrogate closed forms") {
    Rng rng = make_rng(37);
    SECTION("zero factors") {
        Matrix g = gaussian_matrix(6, 5, rng);
        Matrix b = Matrix::Zero(6, 2);
        Matrix a = gaussian_matrix(2, 5, rng);
        Matrix surrogate = equivalent_gradient_surrogate(b, a, g, 3.0);
        REQUIRE(relative_frobenius_error(surrogate, 9.0 * g * a.transpose() * a) <= 1e-13);
        REQUIRE(equivalent_gradient_surrogate(b, Matrix::Zero(2, 5), g, 3.0).cwiseAbs().maxCoeff() ==
                0.0);
    }
    SECTION("svd-initialized factors") {
        REQUIRE(check_surrogate_closed_form(91).passed);
    }
    SECTION("shape mismatch") {
        Matrix g = gaussian_matrix(6, 5, rng);
        REQUIRE_THROWS_AS(
            equivalent_gradient_surrogate(Matrix::Zero(6, 2), Matrix::Zero(3, 5), g, 1.0),
            InvalidInput);
    }
}

TEST_CASE("first-order update check is O(lr)") {
    Rng rng = make_rng(38);
    Matrix w0 = gaussian_matrix(16, 12, rng);
    SpectralMoeLayer layer = init_layer(w0, small_config(), 11);
    Vector x = gaussian_vector(12, rng);
    x /= x.norm();
    Vector target = gaussian_vector(16, rng);
    const double e4 = first_order_update_check(layer, x, target, 1e-4);
    const double e5 = first_order_update_check(layer, x, target, 1e-5);
    const double e6 = first_order_update_check(layer, x, target, 1e-6);
    REQUIRE(e5 <= 1e-3);
    const double slope = (std::log(e4) - std::log(e6)) / (std::log(1e-4) - std::log(1e-6));
    REQUIRE(slope >= 0.8);
    REQUIRE(slope <= 1.2);
}

TEST_CASE("zero upstream gives zero equivalent update") {
    Rng rng = make_rng(39);
    Matrix w0 = gaussian_matrix(16, 12, rng);
    SpectralMoeLayer layer = init_layer(w0, small_config(), 12);
    Vector x = gaussian_vector(12, rng);
    // target equal to the forward output makes the upstream vanish
    Vector target = forward(layer, x).y;
    LayerGradients g = backward(layer, x, Vector::Zero(16), false);
    for (const Matrix& gb : g.grad_b) REQUIRE(gb.cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(first_order_update_check(layer, x, target, 1e-5) == 0.0);
}

TEST_CASE("forward at init is invariant to the scale parameter") {
    Rng rng = make_rng(40);
    Matrix w0 = gaussian_matrix(16, 12, rng);
    std::vector<SpectralMoeLayer> layers;
    for (double s : {1.0, 4.0, 16.0}) {
        LayerConfig lc = small_config();
        lc.scale = ScaleSpec::fixed(s);
        layers.push_back(init_layer(w0, lc, 13));
    }
    for (int t = 0; t < 10; ++t) {
        Vector x = gaussian_vector(12, rng);
        Vector ref = forward(layers[0], x).y;
        for (std::size_t i = 1; i < layers.size(); ++i)
            REQUIRE(relative_l2_error(forward(layers[i], x).y, ref) <= 1e-10);
    }
}

TEST_CASE("per-expert scaling keeps the init function and satisfies the identity") {
    Rng rng = make_rng(41);
    Matrix w0 = gaussian_matrix(16, 12, rng);
    LayerConfig lc = small_config();
    lc.per_expert_scaling = true;
    SpectralMoeLayer layer = init_layer(w0, lc, 14);
    const double s1 = layer.expert_scale(0);
    const double sigma0 = layer.experts[0].segment->spectral_mass;
    for (Index i = 0; i < lc.n_experts; ++i) {
        const double si = layer.expert_scale(i);
        const double sigma_i = layer.experts[static_cast<std::size_t>(i)].segment->spectral_mass;
        REQUIRE(si * si * sigma_i == Catch::Approx(s1 * s1 * sigma0).epsilon(1e-12));
    }
    REQUIRE(relative_frobenius_error(layer.original_weight(), w0) <= 1e-12);
}

TEST_CASE("scaling alignment check concentrates with draws") {
    ScalingAlignmentResult r100 = scaling_alignment_check(256, 8, 1.0, 100, 1);
    ScalingAlignmentResult r800 = scaling_alignment_check(256, 8, 1.0, 800, 2);
    REQUIRE(r800.diag_rel_error < r100.diag_rel_error);
    REQUIRE(r800.diag_rel_error < 0.05);
    // r = n makes s* = sqrt(3 eta) and the expectation exact
    ScalingAlignmentResult square = scaling_alignment_check(64, 64, 1.0, 400, 3);
    REQUIRE(square.s_star == Catch::Approx(std::sqrt(3.0)).margin(1e-12));
    REQUIRE(square.diag_rel_error < 0.05);
}

TEST_CASE("empirical residual estimate approaches the closed form") {
    Rng rng = make_rng(42);
    Matrix w0 = gaussian_matrix(16, 12, rng);
    LayerConfig lc = small_config();
    lc.router_init = LayerConfig::RouterInit::Symmetric;
    SpectralMoeLayer layer = init_layer(w0, lc, 15);
    Matrix empirical = residual_compensation_empirical(layer, 40000, 16);
    REQUIRE(relative_frobenius_error(empirical, layer.residual) <= 0.05);
}

TEST_CASE("layer checkpoint round-trips bit-exactly") {
    Rng rng = make_rng(43);
    Matrix w0 = gaussian_matrix(16, 12, rng);
    LayerConfig lc = small_config();
    lc.per_expert_scaling = true;
    SpectralMoeLayer layer = init_layer(w0, lc, 17);
    std::stringstream buffer(std::ios::in | std::ios::out | std::ios::binary);
    save_layer(layer, buffer);
    SpectralMoeLayer loaded = load_layer(buffer);

    REQUIRE(loaded.config.m == layer.config.m);
    REQUIRE(loaded.config.scheme.variant == layer.config.scheme.variant);
    REQUIRE(loaded.s == layer.s);
    REQUIRE((loaded.base - layer.base).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((loaded.residual - layer.residual).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((loaded.router.w - layer.router.w).cwiseAbs().maxCoeff() == 0.0);
    for (std::size_t i = 0; i < layer.experts.size(); ++i) {
        REQUIRE((loaded.experts[i].b - layer.experts[i].b).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE((loaded.experts[i].a - layer.experts[i].a).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE(loaded.experts[i].segment.has_value() == layer.experts[i].segment.has_value());
        REQUIRE(loaded.experts[i].scale == layer.experts[i].scale);
    }
    // the serialized bytes themselves reproduce exactly
    std::stringstream second(std::ios::in | std::ios::out | std::ios::binary);
    save_layer(loaded, second);
    REQUIRE(second.str() == buffer.str());
}

TEST_CASE("checkpoint rejects corrupt payloads") {
    std::stringstream buffer(std::ios::in | std::ios::out | std::ios::binary);
    buffer << "not a checkpoint";
    REQUIRE_THROWS_AS(load_layer(buffer), InvalidInput);
}

TEST_CASE("init_layer validates configuration") {
    Rng rng = make_rng(44);
    Matrix w0 = gaussian_matrix(16, 12, rng);
    LayerConfig bad = small_config();
    bad.total_rank = 7;  // not divisible by 4 experts
    REQUIRE_THROWS_AS(init_layer(w0, bad, 1), InvalidInput);
    LayerConfig too_big = small_config();
    too_big.total_rank = 64;
    REQUIRE_THROWS_AS(init_layer(w0, too_big, 1), InsufficientRank);
}

#include "smoe/oracles.hpp"

#include "smoe/verify.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace smoe;

TEST_CASE("full FT gradient closed form and finite differences") {
    Rng rng = make_rng(51);
    FullFtModel model{gaussian_matrix(7, 5, rng)};
    Vector x = gaussian_vector(5, rng);
    Vector target = gaussian_vector(7, rng);

    Matrix analytic = full_ft_gradient(model, x, target, LossKind::SquaredError);
    Matrix expected = (model.w * x - target) * x.transpose();
    REQUIRE(relative_frobenius_error(analytic, expected) <= 1e-14);

    Matrix fd = finite_diff_gradient(
        [&](const Matrix& w) {
            return loss_value(LossKind::SquaredError, w * x, target);
        },
        model.w, 1e-6);
    REQUIRE(gradcheck_rel(analytic, fd) <= 1e-6);

    REQUIRE(full_ft_gradient(model, Vector::Zero(5), target, LossKind::SquaredError)
                .cwiseAbs()
                .maxCoeff() == 0.0);
}

TEST_CASE("cross-entropy gradient matches finite differences") {
    Rng rng = make_rng(52);
    FullFtModel model{gaussian_matrix(6, 4, rng)};
    Vector x = gaussian_vector(4, rng);
    Vector target = Vector::Zero(6);
    target(2) = 1.0;
    Matrix analytic = full_ft_gradient(model, x, target, LossKind::SoftmaxCrossEntropy);
    Matrix fd = finite_diff_gradient(
        [&](const Matrix& w) {
            return loss_value(LossKind::SoftmaxCrossEntropy, w * x, target);
        },
        model.w, 1e-6);
    REQUIRE(gradcheck_rel(analytic, fd) <= 1e-6);
}

TEST_CASE("finite differences on quadratic and linear functions") {
    Rng rng = make_rng(53);
    Matrix theta = gaussian_matrix(5, 4, rng);
    Matrix fd = finite_diff_gradient(
        [](const Matrix& t) { return 0.5 * t.squaredNorm(); }, theta, 1e-6);
    REQUIRE((fd - theta).cwiseAbs().maxCoeff() <= 1e-8);

    Matrix direction = gaussian_matrix(5, 4, rng);
    Matrix fd_linear = finite_diff_gradient(
        [&](const Matrix& t) { return (t.array() * direction.array()).sum(); }, theta, 1e-6);
    REQUIRE((fd_linear - direction).cwiseAbs().maxCoeff() <= 1e-9);

    REQUIRE_THROWS_AS(finite_diff_gradient([](const Matrix&) { return 1.0; }, theta, 0.0),
                      InvalidInput);
}

TEST_CASE("upcycled MoE reproduces the base weight at init") {
    Rng rng = make_rng(54);
    Matrix w0 = gaussian_matrix(9, 7, rng);
    Matrix router_w = gaussian_matrix(7, 4, rng) * 0.02;
    for (Index k : {Index(1), Index(2), Index(4)}) {
        UpcycledMoeModel model = UpcycledMoeModel::upcycle(w0, GateConfig{4, k, 0.0}, router_w);
        for (int t = 0; t < 6; ++t) {
            Vector x = gaussian_vector(7, rng);
            REQUIRE(relative_l2_error(model.forward(x), Vector(w0 * x)) <= 1e-13);
        }
    }
}

TEST_CASE("upcycled gradients match finite differences") {
    Rng rng = make_rng(55);
    Matrix w0 = gaussian_matrix(8, 6, rng);
    Matrix router_w = gaussian_matrix(6, 3, rng) * 0.02;
    UpcycledMoeModel model = UpcycledMoeModel::upcycle(w0, GateConfig{3, 2, 0.0}, router_w);
    // de-upcycle slightly so expert gradients are not symmetric
    for (std::size_t i = 0; i < model.experts.size(); ++i)
        model.experts[i] += 0.1 * gaussian_matrix(8, 6, rng);
    Vector x = gaussian_vector(6, rng);
    Vector target = gaussian_vector(8, rng);
    UpcycledBackward back = upcycled_forward_backward(model, x, target, LossKind::SquaredError);

    for (Index e = 0; e < 3; ++e) {
        const bool selected = std::find(back.gate.selected.begin(), back.gate.selected.end(), e) !=
                              back.gate.selected.end();
        if (!selected) {
            REQUIRE(back.expert_grads[static_cast<std::size_t>(e)].cwiseAbs().maxCoeff() == 0.0);
            continue;
        }
        Matrix fd = finite_diff_gradient(
            [&](const Matrix& w) {
                UpcycledMoeModel perturbed = model;
                perturbed.experts[static_cast<std::size_t>(e)] = w;
                return loss_value(LossKind::SquaredError, perturbed.forward(x), target);
            },
            model.experts[static_cast<std::size_t>(e)], 1e-6);
        REQUIRE(gradcheck_rel(back.expert_grads[static_cast<std::size_t>(e)], fd) <= 1e-5);
    }
    Matrix fd_router = finite_diff_gradient(
        [&](const Matrix& w) {
            UpcycledMoeModel perturbed = model;
            perturbed.router.w = w;
            return loss_value(LossKind::SquaredError, perturbed.forward(x), target);
        },
        model.router.w, 1e-6);
    REQUIRE(gradcheck_rel(back.router_grad, fd_router) <= 1e-5);
}

namespace {

struct TracePair {
    SpectralMoeLayer lora;
    UpcycledMoeModel ft;
    Matrix w_star;
};

// Shared pretrained weight, identical frozen routers, zero-init adapters.
TracePair make_trace_pair(double s, std::uint64_t seed, double eta) {
    const Index m = 64, n = 64, n_experts = 4, top_k = 2, rank = 16;
    Rng rng = make_rng(seed);
    Matrix u = random_orthonormal(m, m, rng);
    Matrix v = random_orthonormal(n, n, rng);
    Vector sv(n);
    for (Index i = 0; i < n; ++i)
        sv(i) = 2.0 - 1.5 * static_cast<double>(i) / static_cast<double>(n - 1);
    Matrix w0 = u * sv.asDiagonal() * v.transpose();
    Matrix w_star = w0 + 0.3 * gaussian_matrix(m, n, rng);

    LayerConfig lc;
    lc.m = m;
    lc.n = n;
    lc.total_rank = rank;
    lc.n_experts = n_experts;
    lc.top_k = top_k;
    lc.scale = ScaleSpec::fixed(s);
    lc.rho = 1.0;
    lc.eta = eta;
    lc.spectral_init = false;
    SpectralMoeLayer lora = init_layer(w0, lc, seed + 1);
    UpcycledMoeModel ft =
        UpcycledMoeModel::upcycle(w0, GateConfig{n_experts, top_k, 0.0}, lora.router.w);
    return {std::move(lora), std::move(ft), std::move(w_star)};
}

double trace_final(double s, std::uint64_t seed, double lr_lora, double eta) {
    TracePair pair = make_trace_pair(s, seed, eta);
    AlignmentTrace trace = alignment_trace(pair.lora, pair.ft, pair.w_star, 100, lr_lora,
                                           lr_lora * eta, seed + 2);
    return trace.final_divergence.mean();
}

}  // namespace

TEST_CASE("alignment trace base cases") {
    TracePair pair = make_trace_pair(2.0, 61, 1.0);
    SECTION("zero-init divergence starts at zero") {
        AlignmentTrace trace =
            alignment_trace(pair.lora, pair.ft, pair.w_star, 1, 0.0, 0.0, 63);
        REQUIRE(trace.final_divergence.maxCoeff() <= 1e-12);
    }
    SECTION("frozen adapter divergence equals the FT displacement") {
        const double lr_ft = 2e-4;
        AlignmentTrace trace =
            alignment_trace(pair.lora, pair.ft, pair.w_star, 50, 0.0, lr_ft, 64);
        // rebuild the FT model and replay to measure its own displacement
        TracePair replay = make_trace_pair(2.0, 61, 1.0);
        AlignmentTrace same =
            alignment_trace(replay.lora, replay.ft, replay.w_star, 50, 0.0, lr_ft, 64);
        REQUIRE((trace.final_divergence - same.final_divergence).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE(trace.final_divergence.minCoeff() > 0.0);
    }
}

TEST_CASE("scaled divergence ordering across s, eta = 0.1") {
    // eta = 0.1 preset: s* = sqrt(3 n eta / r) with n/r = 4
    const double eta = 0.1;
    const double s_star = optimal_scale(64, 16, eta);
    std::vector<double> at_star, at_two, at_eighth, at_octuple;
    for (std::uint64_t seed = 71; seed < 76; ++seed) {
        at_star.push_back(trace_final(s_star, seed, 2e-3, eta));
        at_two.push_back(trace_final(2.0, seed, 2e-3, eta));
        at_eighth.push_back(trace_final(s_star / 8.0, seed, 2e-3, eta));
        at_octuple.push_back(trace_final(8.0 * s_star, seed, 2e-3, eta));
    }
    REQUIRE(median_of(at_star) < median_of(at_two));
    REQUIRE(median_of(at_star) < median_of(at_eighth));
    REQUIRE(median_of(at_star) < median_of(at_octuple));
}

TEST_CASE("alignment trace rejects mismatched routers") {
    TracePair pair = make_trace_pair(2.0, 62, 1.0);
    pair.ft.router.w(0, 0) += 1.0;
    REQUIRE_THROWS_AS(alignment_trace(pair.lora, pair.ft, pair.w_star, 1, 1e-3, 1e-3, 1),
                      InvalidInput);
}

// verify.hpp -- the theorem-verification suite: each check pins its
// parameters and tolerance and reports a measured value, so the CLI and the
// acceptance harness share one implementation.
#pragma once

#include "smoe/core.hpp"
#include "smoe/moe_layer.hpp"
#include "smoe/oracles.hpp"
#include "smoe/routing.hpp"
#include "smoe/spectral.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace smoe {

struct CheckResult {
    std::string name;
    bool required = true;  // informational measurements set this false
    bool passed = true;
    double measured = 0.0;
    double tolerance = 0.0;
    std::string detail;
};

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::string format_double_short(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

inline CheckResult make_check(const std::string& name, double measured, double tolerance,
                              bool passed, const std::string& detail = "") {
    return CheckResult{name, true, passed, measured, tolerance, detail};
}

// --- Theorem 3: router moment identities ------------------------------------

inline CheckResult check_router_mean(std::uint64_t seed) {
    const GateConfig gate{8, 2, 0.0};
    MomentEstimate est = estimate_moments(gate, gaussian_logits(1.0), 1000000, seed);
    const double target = 1.0 / 8.0;
    const double err = (est.mean.array() - target).abs().maxCoeff();
    return make_check("thm3-router-mean", err, 1e-3, err <= 1e-3,
                      "max per-expert |mean - 0.125|, 1e6 Gaussian logit draws");
}

inline std::vector<CheckResult> check_router_variance(std::uint64_t seed) {
    const GateConfig gate{8, 2, 0.0};
    const double formula = theoretical_moments(8, 2).second;  // 0.046875
    MomentEstimate tight = estimate_moments(gate, gaussian_logits(1e-6), 1000000, seed);
    const double err = (tight.variance.array() - formula).abs().maxCoeff();
    MomentEstimate wide = estimate_moments(gate, gaussian_logits(1.0), 1000000, seed + 1);
    const double slack = formula - wide.variance.minCoeff();
    std::vector<CheckResult> out;
    out.push_back(make_check("thm3-router-variance-degenerate", err, 2e-3, err <= 2e-3,
                             "max |var - (N-k)/(kN^2)| under logit spread 1e-6"));
    out.push_back(make_check("thm3-router-variance-lower-bound", slack, 2e-3, slack <= 2e-3,
                             "formula minus min per-expert variance, unit logit spread"));
    CheckResult gap = make_check("router-variance-general-gap",
                                 wide.variance.mean() - formula, 0.0, true,
                                 "variance excess over the formula for unit-spread logits");
    gap.required = false;
    out.push_back(gap);
    return out;
}

// --- Theorem 4: residual matching --------------------------------------------

inline std::vector<CheckResult> check_residual_matching(std::uint64_t seed) {
    std::vector<CheckResult> out;
    LayerConfig lc;
    lc.m = 64;
    lc.n = 64;
    lc.total_rank = 32;
    lc.n_experts = 8;
    lc.top_k = 2;
    lc.scale = ScaleSpec::auto_per_expert();
    lc.rho = 10.0;
    lc.router_init = LayerConfig::RouterInit::Symmetric;
    Rng w_rng = make_rng(seed, 11);
    const Matrix w0 = gaussian_matrix(64, 64, w_rng);
    SpectralMoeLayer layer = init_layer(w0, lc, mix_seed(seed, 12));

    std::vector<Matrix> products;
    for (Index i = 0; i < lc.n_experts; ++i) {
        const ExpertAdapter& e = layer.experts[static_cast<std::size_t>(i)];
        products.push_back(layer.expert_scale(i) * (e.b * e.a));
    }
    const Index samples = 100000;
    Matrix mean = Matrix::Zero(64, 64);
    Matrix sumsq = Matrix::Zero(64, 64);
    Rng x_rng = make_rng(seed, 13);
    for (Index t = 0; t < samples; ++t) {
        Vector x = gaussian_vector(64, x_rng);
        GateOutput gate = topk_gate(layer.router, x, lc.gate());
        Matrix dev = -layer.residual;
        for (Index i : gate.selected) dev += gate.weights(i) * products[static_cast<std::size_t>(i)];
        mean += dev;
        sumsq += dev.cwiseAbs2();
    }
    mean /= static_cast<double>(samples);
    Matrix variance = sumsq / static_cast<double>(samples) - mean.cwiseAbs2();
    const double root_s = std::sqrt(static_cast<double>(samples));
    double zmax = 0.0;
    for (Index j = 0; j < 64; ++j)
        for (Index i = 0; i < 64; ++i) {
            const double se = std::sqrt(std::max(variance(i, j), 0.0)) / root_s + 1e-15;
            zmax = std::max(zmax, std::abs(mean(i, j)) / se);
        }
    out.push_back(make_check("thm4-residual-matching", zmax, 4.0, zmax <= 4.0,
                             "max per-entry |E[W~(x)] - W0| in units of sigma/sqrt(1e5), "
                             "N=8 k=2, symmetric router"));

    LayerConfig single = lc;
    single.n_experts = 1;
    single.top_k = 1;
    SpectralMoeLayer one = init_layer(w0, single, mix_seed(seed, 14));
    Rng x1 = make_rng(seed, 15);
    double worst = 0.0;
    for (int t = 0; t < 8; ++t) {
        Vector x = gaussian_vector(64, x1);
        worst = std::max(worst, relative_frobenius_error(equivalent_weight(one, x), w0));
    }
    out.push_back(make_check("thm4-single-expert-exact", worst, 1e-12, worst <= 1e-12,
                             "max relative ||W~(x) - W0|| with N=1"));
    return out;
}

// --- gradient correctness -----------------------------------------------------

struct GradientCheckSummary {
    double max_rel_error = 0.0;
    double max_unselected = 0.0;
    int cases = 0;
};

inline double gradcheck_rel(const Matrix& analytic, const Matrix& fd) {
    double worst = 0.0;
    for (Index j = 0; j < analytic.cols(); ++j)
        for (Index i = 0; i < analytic.rows(); ++i) {
            const double denom =
                std::max({1.0, std::abs(analytic(i, j)), std::abs(fd(i, j))});
            worst = std::max(worst, std::abs(analytic(i, j) - fd(i, j)) / denom);
        }
    return worst;
}

inline GradientCheckSummary run_gradient_checks(std::uint64_t seed) {
    GradientCheckSummary summary;
    const double step = 1e-6;
    int case_id = 0;
    for (Index n_experts : {Index(1), Index(2), Index(4)}) {
        for (Index top_k = 1; top_k <= std::min<Index>(2, n_experts); ++top_k) {
            for (bool spectral : {true, false}) {
                for (bool with_balance : {false, true}) {
                    ++case_id;
                    LayerConfig lc;
                    lc.m = 16;
                    lc.n = 12;
                    lc.n_experts = n_experts;
                    lc.top_k = top_k;
                    lc.total_rank = n_experts * std::min<Index>(3, 12 / n_experts);
                    lc.scale = ScaleSpec::fixed(4.0);
                    lc.rho = 10.0;
                    lc.spectral_init = spectral;
                    lc.scheme = SegmentScheme::principal();
                    lc.balance_coefficient = with_balance ? 1e-2 : 0.0;
                    Rng rng = make_rng(seed, 100 + static_cast<std::uint64_t>(case_id));
                    Matrix w0 = gaussian_matrix(16, 12, rng);
                    SpectralMoeLayer layer =
                        init_layer(w0, lc, mix_seed(seed, 200 + static_cast<std::uint64_t>(case_id)));
                    Vector x = gaussian_vector(12, rng);
                    Vector target = gaussian_vector(16, rng);

                    ForwardResult f0 = forward(layer, x);
                    LayerGradients grads = backward(layer, x, f0.y - target, with_balance);

                    auto loss_with = [&](const SpectralMoeLayer& l) {
                        ForwardResult f = forward(l, x);
                        double loss = 0.5 * (f.y - target).squaredNorm();
                        if (with_balance) {
                            double p_sel = 0.0;
                            for (Index i : f.gate.selected) p_sel += f.gate.dense_probs(i);
                            loss += lc.balance_coefficient *
                                    (static_cast<double>(n_experts) / static_cast<double>(top_k)) *
                                    p_sel;
                        }
                        return loss;
                    };

                    for (Index e = 0; e < n_experts; ++e) {
                        const bool selected =
                            std::find(f0.gate.selected.begin(), f0.gate.selected.end(), e) !=
                            f0.gate.selected.end();
                        if (!selected) {
                            summary.max_unselected =
                                std::max({summary.max_unselected,
                                          grads.grad_b[static_cast<std::size_t>(e)].cwiseAbs().maxCoeff(),
                                          grads.grad_a[static_cast<std::size_t>(e)].cwiseAbs().maxCoeff()});
                            continue;
                        }
                        Matrix fd_b = finite_diff_gradient(
                            [&](const Matrix& theta) {
                                SpectralMoeLayer l = layer;
                                l.experts[static_cast<std::size_t>(e)].b = theta;
                                return loss_with(l);
                            },
                            layer.experts[static_cast<std::size_t>(e)].b, step);
                        Matrix fd_a = finite_diff_gradient(
                            [&](const Matrix& theta) {
                                SpectralMoeLayer l = layer;
                                l.experts[static_cast<std::size_t>(e)].a = theta;
                                return loss_with(l);
                            },
                            layer.experts[static_cast<std::size_t>(e)].a, step);
                        summary.max_rel_error = std::max(
                            {summary.max_rel_error,
                             gradcheck_rel(grads.grad_b[static_cast<std::size_t>(e)], fd_b),
                             gradcheck_rel(grads.grad_a[static_cast<std::size_t>(e)], fd_a)});
                    }
                    Matrix fd_router = finite_diff_gradient(
                        [&](const Matrix& theta) {
                            SpectralMoeLayer l = layer;
                            l.router.w = theta;
                            return loss_with(l);
                        },
                        layer.router.w, step);
                    summary.max_rel_error =
                        std::max(summary.max_rel_error, gradcheck_rel(grads.grad_router, fd_router));
                    ++summary.cases;
                }
            }
        }
    }
    return summary;
}

inline std::vector<CheckResult> check_gradient_correctness(std::uint64_t seed) {
    GradientCheckSummary s = run_gradient_checks(seed);
    std::vector<CheckResult> out;
    out.push_back(make_check("gradient-finite-difference", s.max_rel_error, 1e-5,
                             s.max_rel_error <= 1e-5 && s.cases >= 20,
                             "max relative error over " + std::to_string(s.cases) +
                                 " random layers (adapters and router)"));
    out.push_back(make_check("gradient-unselected-zero", s.max_unselected, 0.0,
                             s.max_unselected == 0.0,
                             "max |grad| over non-selected experts (exact zero required)"));
    return out;
}

// --- equivalent-gradient closed form -----------------------------------------

inline CheckResult check_surrogate_closed_form(std::uint64_t seed) {
    double worst = 0.0;
    for (int inst = 0; inst < 10; ++inst) {
        Rng rng = make_rng(seed, 300 + static_cast<std::uint64_t>(inst));
        const Index m = 14, n = 10, r = 4;
        Matrix w0 = gaussian_matrix(m, n, rng);
        SvdFactors f = svd_decompose(w0);
        const double s = 2.0 + inst;
        ExpertAdapter adapter = single_lora_init(f, 0, r, s);
        Matrix g = gaussian_matrix(m, n, rng);
        Matrix surrogate = equivalent_gradient_surrogate(adapter.b, adapter.a, g, s);
        Matrix ur = f.u.leftCols(r);
        Vector sr = f.s.head(r);
        Matrix vr = f.v.leftCols(r);
        Matrix closed = s * (ur * sr.asDiagonal() * ur.transpose() * g +
                             g * vr * sr.asDiagonal() * vr.transpose());
        worst = std::max(worst, relative_frobenius_error(surrogate, closed));
    }
    return make_check("equivalent-gradient-closed-form", worst, 1e-12, worst <= 1e-12,
                      "s^2(BB^T g + gA^T A) vs s(U_r S_r U_r^T g + g V_r S_r V_r^T), 10 instances");
}

// --- Theorem 5: scaling alignment --------------------------------------------

inline std::vector<CheckResult> check_scaling_alignment(std::uint64_t seed) {
    std::vector<CheckResult> out;
    ScalingAlignmentResult main = scaling_alignment_check(1024, 8, 1.0, 1000, mix_seed(seed, 400));
    out.push_back(make_check("thm5-scaling-alignment", main.diag_rel_error, 0.05,
                             main.diag_rel_error < 0.05,
                             "identity-component relative error of s*^2 mean(A0^T A0), 1000 draws; "
                             "off-diagonal rms " + format_double_short(main.offdiag_rms)));
    std::vector<double> small, large;
    for (int rep = 0; rep < 5; ++rep) {
        small.push_back(scaling_alignment_check(1024, 8, 1.0, 100, mix_seed(seed, 410 + rep))
                            .diag_rel_error);
        large.push_back(scaling_alignment_check(1024, 8, 1.0, 1000, mix_seed(seed, 420 + rep))
                            .diag_rel_error);
    }
    const double med_small = median_of(small);
    const double med_large = median_of(large);
    out.push_back(make_check("thm5-error-decreases-with-draws", med_large, med_small,
                             med_large < med_small,
                             "median over 5 repeats: err(1000 draws) < err(100 draws)"));
    ScalingAlignmentResult off =
        scaling_alignment_check_scaled(1024, 8, 1.0, 2.0, 200, mix_seed(seed, 430));
    CheckResult info = make_check("scaling-mismatch-at-s2", off.diag_rel_error, 0.0, true,
                                  "measured misalignment when s is forced to 2 (informational)");
    info.required = false;
    out.push_back(info);
    return out;
}

// --- Theorems 1-2: first-order update alignment -------------------------------

inline std::vector<CheckResult> check_first_order(std::uint64_t seed) {
    std::vector<double> errors_mid;
    std::vector<double> slopes;
    for (int inst = 0; inst < 5; ++inst) {
        Rng rng = make_rng(seed, 500 + static_cast<std::uint64_t>(inst));
        LayerConfig lc;
        lc.m = 16;
        lc.n = 12;
        lc.n_experts = 2;
        lc.top_k = 2;
        lc.total_rank = 6;
        lc.scale = ScaleSpec::fixed(4.0);
        lc.rho = 10.0;
        lc.scheme = SegmentScheme::principal();
        Matrix w0 = gaussian_matrix(16, 12, rng);
        SpectralMoeLayer layer = init_layer(w0, lc, mix_seed(seed, 510 + inst));
        Vector x = gaussian_vector(12, rng);
        x /= x.norm();
        Vector target = gaussian_vector(16, rng);
        const double e4 = first_order_update_check(layer, x, target, 1e-4);
        const double e5 = first_order_update_check(layer, x, target, 1e-5);
        const double e6 = first_order_update_check(layer, x, target, 1e-6);
        errors_mid.push_back(e5);
        slopes.push_back((std::log(e4) - std::log(e6)) / (std::log(1e-4) - std::log(1e-6)));
    }
    std::vector<CheckResult> out;
    const double worst_mid = *std::max_element(errors_mid.begin(), errors_mid.end());
    out.push_back(make_check("thm1-2-first-order-error", worst_mid, 1e-3, worst_mid <= 1e-3,
                             "max relative error of dW~ vs -lr g~ at lr=1e-5, 5 random layers"));
    const double med_slope = median_of(slopes);
    out.push_back(make_check("thm1-2-first-order-slope", med_slope, 1.2,
                             med_slope >= 0.8 && med_slope <= 1.2,
                             "median log-log slope of error vs lr over {1e-4,1e-5,1e-6}"));
    return out;
}

// --- SVD reconstruction --------------------------------------------------------

inline CheckResult check_svd_reconstruction(std::uint64_t seed) {
    double worst = 0.0;
    int inst = 0;
    for (auto [m, n] : {std::pair<Index, Index>{8, 6}, {24, 40}, {64, 64}}) {
        Rng rng = make_rng(seed, 600 + static_cast<std::uint64_t>(inst++));
        Matrix w = gaussian_matrix(m, n, rng);
        SvdFactors f = svd_decompose(w);
        worst = std::max(worst, relative_frobenius_error(f.reconstruct(), w));
        const Index h = f.rank();
        worst = std::max(worst, (f.u.transpose() * f.u - Matrix::Identity(h, h)).cwiseAbs().maxCoeff());
        worst = std::max(worst, (f.v.transpose() * f.v - Matrix::Identity(h, h)).cwiseAbs().maxCoeff());
    }
    return make_check("svd-reconstruction", worst, 1e-10, worst <= 1e-10,
                      "max of relative reconstruction error and orthonormality defect");
}

// --- scale invariance at initialization ----------------------------------------

inline std::vector<CheckResult> check_scale_invariance(std::uint64_t seed) {
    std::vector<CheckResult> out;
    Rng rng = make_rng(seed, 700);
    Matrix w0 = gaussian_matrix(64, 64, rng);
    std::vector<SpectralMoeLayer> layers;
    for (double s : {1.0, 4.0, 16.0}) {
        LayerConfig lc;
        lc.m = 64;
        lc.n = 64;
        lc.total_rank = 32;
        lc.n_experts = 8;
        lc.top_k = 2;
        lc.scale = ScaleSpec::fixed(s);
        lc.rho = 10.0;
        layers.push_back(init_layer(w0, lc, mix_seed(seed, 701)));
    }
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
        Vector x = gaussian_vector(64, rng);
        Vector ref = forward(layers[0], x).y;
        for (std::size_t v = 1; v < layers.size(); ++v)
            worst = std::max(worst, relative_l2_error(forward(layers[v], x).y, ref));
    }
    out.push_back(make_check("init-scale-invariance", worst, 1e-10, worst <= 1e-10,
                             "max relative forward deviation across s in {1,4,16}"));

    LayerConfig lc;
    lc.m = 64;
    lc.n = 64;
    lc.total_rank = 32;
    lc.n_experts = 8;
    lc.top_k = 2;
    lc.scale = ScaleSpec::fixed(4.0);
    lc.rho = 10.0;
    lc.per_expert_scaling = true;
    SpectralMoeLayer aligned = init_layer(w0, lc, mix_seed(seed, 702));
    double worst_id = 0.0;
    const double s1 = aligned.expert_scale(0);
    const double sigma0 = aligned.experts.front().segment->spectral_mass;
    for (Index i = 0; i < lc.n_experts; ++i) {
        const double si = aligned.expert_scale(i);
        const double sigma_i = aligned.experts[static_cast<std::size_t>(i)].segment->spectral_mass;
        worst_id = std::max(worst_id,
                            std::abs(si * si * sigma_i - s1 * s1 * sigma0) / (s1 * s1 * sigma0));
    }
    out.push_back(make_check("expert-aligned-scale-identity", worst_id, 1e-12, worst_id <= 1e-12,
                             "max relative |s_i^2 sigma_i - s_1^2 sigma_0|"));
    return out;
}

inline std::vector<CheckResult> run_verification_suite(std::uint64_t seed) {
    std::vector<CheckResult> results;
    auto append = [&](std::vector<CheckResult> more) {
        for (CheckResult& r : more) results.push_back(std::move(r));
    };
    results.push_back(check_svd_reconstruction(seed));
    results.push_back(check_router_mean(seed));
    append(check_router_variance(seed));
    append(check_residual_matching(seed));
    append(check_gradient_correctness(seed));
    results.push_back(check_surrogate_closed_form(seed));
    append(check_scaling_alignment(seed));
    append(check_first_order(seed));
    append(check_scale_invariance(seed));
    return results;
}

}  // namespace smoe

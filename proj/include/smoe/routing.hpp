// routing.hpp -- dense softmax gating, sparse top-k gating, the load-balance
// loss, and Monte Carlo verification of the router moment identities.
#pragma once

#include "smoe/core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

namespace smoe {

struct GateConfig {
    Index n_experts = 1;
    Index top_k = 1;
    double balance_coefficient = 1e-3;

    void validate() const {
        if (n_experts < 1) throw InvalidInput("GateConfig: n_experts must be >= 1");
        if (top_k < 1 || top_k > n_experts)
            throw InvalidInput("GateConfig: top_k must satisfy 1 <= k <= N");
        if (balance_coefficient < 0.0)
            throw InvalidInput("GateConfig: balance coefficient must be >= 0");
    }
};

// Trainable gating weights; logits are w^T x, so rows match the input dim.
struct RouterState {
    Matrix w;  // input_dim x N

    Index input_dim() const { return w.rows(); }
    Index n_experts() const { return w.cols(); }

    Vector logits(const Vector& x) const {
        if (x.size() != w.rows()) throw InvalidInput("router: input dimension mismatch");
        return w.transpose() * x;
    }
};

inline Vector softmax(const Vector& z) {
    Vector e = (z.array() - z.maxCoeff()).exp();
    return e / e.sum();
}

// Indices of the k largest logits; ties break toward the lower expert index.
inline std::vector<Index> topk_select(const Vector& z, Index k) {
    std::vector<Index> idx(static_cast<std::size_t>(z.size()));
    std::iota(idx.begin(), idx.end(), Index{0});
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Index a, Index b) {
        if (z(a) != z(b)) return z(a) > z(b);
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

// Gate output for one input: the selected set (by descending logit), the
// renormalized top-k weights (zero outside the set), and the dense softmax
// over all logits (kept for the balance loss).
struct GateOutput {
    std::vector<Index> selected;
    Vector weights;      // length N
    Vector dense_probs;  // length N
};

inline Vector dense_gate(const RouterState& state, const Vector& x) {
    return softmax(state.logits(x));
}

inline GateOutput topk_gate_from_logits(const Vector& z, const GateConfig& config) {
    config.validate();
    if (z.size() != config.n_experts)
        throw InvalidInput("topk_gate: logit count does not match n_experts");
    GateOutput out;
    out.selected = topk_select(z, config.top_k);
    out.dense_probs = softmax(z);
    out.weights = Vector::Zero(config.n_experts);
    double zmax = z(out.selected.front());
    double denom = 0.0;
    for (Index i : out.selected) denom += std::exp(z(i) - zmax);
    for (Index i : out.selected) out.weights(i) = std::exp(z(i) - zmax) / denom;
    return out;
}

inline GateOutput topk_gate(const RouterState& state, const Vector& x,
                            const GateConfig& config) {
    return topk_gate_from_logits(state.logits(x), config);
}

// L_b = sum_i f_i P_i with f_i = (N/(kT)) count_i and P_i the batch-mean
// dense softmax probability. Equals 1 at perfect balance, N at collapse.
inline double balance_loss(const std::vector<Index>& assignment_counts,
                           const Vector& dense_probs_mean, const GateConfig& config,
                           Index token_count) {
    config.validate();
    if (token_count < 1) throw InvalidInput("balance_loss: token count must be positive");
    if (static_cast<Index>(assignment_counts.size()) != config.n_experts ||
        dense_probs_mean.size() != config.n_experts)
        throw InvalidInput("balance_loss: per-expert sizes do not match n_experts");
    Index total = 0;
    for (Index c : assignment_counts) total += c;
    if (total != config.top_k * token_count)
        throw InvalidInput("balance_loss: counts must sum to k*T");
    const double norm = static_cast<double>(config.n_experts) /
                        (static_cast<double>(config.top_k) * static_cast<double>(token_count));
    double acc = 0.0;
    for (Index i = 0; i < config.n_experts; ++i)
        acc += norm * static_cast<double>(assignment_counts[i]) * dense_probs_mean(i);
    return acc;
}

// Exact router moments under exchangeable logits: mean 1/N; the variance
// formula is exact in the vanishing-logit-spread limit and a lower bound
// otherwise (selected weights sum to 1, so sum of squares >= 1/k).
inline std::pair<double, double> theoretical_moments(Index n_experts, Index top_k) {
    if (n_experts < 1 || top_k < 1 || top_k > n_experts)
        throw InvalidInput("theoretical_moments: need 1 <= k <= N");
    const double n = static_cast<double>(n_experts);
    const double k = static_cast<double>(top_k);
    return {1.0 / n, (n - k) / (k * n * n)};
}

using LogitSampler = std::function<double(Rng&)>;

inline LogitSampler gaussian_logits(double sigma) {
    return [sigma](Rng& rng) {
        std::normal_distribution<double> dist(0.0, sigma);
        return dist(rng);
    };
}

struct MomentEstimate {
    Vector mean;      // per expert
    Vector variance;  // per expert
    Index samples = 0;
};

// Monte Carlo estimate of E[R_i] and Var(R_i) under i.i.d. logits drawn from
// the sampler. Per-expert statistics so routing asymmetry stays visible.
inline MomentEstimate estimate_moments(const GateConfig& config, const LogitSampler& sampler,
                                       Index samples, std::uint64_t seed) {
    config.validate();
    if (samples < 1) throw InvalidInput("estimate_moments: samples must be >= 1");
    Rng rng = make_rng(seed);
    const Index n = config.n_experts;
    Vector sum = Vector::Zero(n);
    Vector sumsq = Vector::Zero(n);
    Vector z(n);
    for (Index t = 0; t < samples; ++t) {
        for (Index i = 0; i < n; ++i) z(i) = sampler(rng);
        GateOutput g = topk_gate_from_logits(z, config);
        sum += g.weights;
        sumsq += g.weights.cwiseProduct(g.weights);
    }
    MomentEstimate est;
    est.samples = samples;
    est.mean = sum / static_cast<double>(samples);
    est.variance = sumsq / static_cast<double>(samples) - est.mean.cwiseProduct(est.mean);
    return est;
}

}  // namespace smoe

// moe_layer.hpp -- the spectral LoRA-MoE layer: compensated frozen base,
// forward pass, analytic backward pass, equivalent weight/gradient
// computation, scaling rules, and the layer checkpoint format.
#pragma once

#include "smoe/core.hpp"
#include "smoe/routing.hpp"
#include "smoe/spectral.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace smoe {

// Scaling factor selection. Auto follows s = sqrt(3 n eta / r) with r the
// total rank; AutoPerExpert applies the same rule to the per-expert width
// d = r/N, which is what the per-expert gradient surrogate calls for.
struct ScaleSpec {
    enum class Mode { Fixed, Auto, AutoPerExpert };
    Mode mode = Mode::Auto;
    double value = 0.0;

    static ScaleSpec fixed(double s) { return {Mode::Fixed, s}; }
    static ScaleSpec automatic() { return {Mode::Auto, 0.0}; }
    static ScaleSpec auto_per_expert() { return {Mode::AutoPerExpert, 0.0}; }
};

inline double optimal_scale(Index n, Index r, double eta) {
    if (n < 1 || r < 1) throw InvalidInput("optimal_scale: n and r must be positive");
    if (!(eta > 0.0)) throw InvalidInput("optimal_scale: eta must be positive");
    return std::sqrt(3.0 * static_cast<double>(n) * eta / static_cast<double>(r));
}

// MedQwen-e alignment: s_i = s_1 * sqrt(sigma_0 / sigma_i), so that
// s_1^2 sigma_0 = s_i^2 sigma_i for every expert.
inline std::vector<double> expert_aligned_scales(const std::vector<double>& spectral_masses,
                                                 double s1) {
    if (spectral_masses.empty()) throw InvalidInput("expert_aligned_scales: empty mass list");
    if (!(s1 > 0.0)) throw InvalidInput("expert_aligned_scales: reference scale must be positive");
    for (double m : spectral_masses)
        if (!(m > 0.0)) throw DegenerateSegment("expert_aligned_scales: zero spectral mass");
    std::vector<double> scales(spectral_masses.size());
    for (std::size_t i = 0; i < spectral_masses.size(); ++i)
        scales[i] = s1 * std::sqrt(spectral_masses[0] / spectral_masses[i]);
    return scales;
}

struct LayerConfig {
    Index m = 0;
    Index n = 0;
    Index total_rank = 0;
    Index n_experts = 1;
    Index top_k = 1;
    ScaleSpec scale = ScaleSpec::automatic();
    double rho = 10.0;
    double eta = 1.0;
    SegmentScheme scheme = SegmentScheme::original();
    bool per_expert_scaling = false;
    bool spectral_init = true;  // false: zero-initialized experts
    double balance_coefficient = 1e-3;
    // Gaussian entries (std 0.02) by default; symmetric uses equal-norm
    // orthogonal columns so logits under isotropic inputs are exactly
    // i.i.d. -- the exchangeability the moment identities assume.
    enum class RouterInit { Gaussian, Symmetric };
    RouterInit router_init = RouterInit::Gaussian;
    double router_std = 0.02;

    Index expert_width() const { return total_rank / n_experts; }

    void validate() const {
        if (m < 1 || n < 1) throw InvalidInput("LayerConfig: dimensions must be positive");
        if (n_experts < 1) throw InvalidInput("LayerConfig: n_experts must be >= 1");
        if (total_rank < 1 || total_rank % n_experts != 0)
            throw InvalidInput("LayerConfig: total_rank must be a positive multiple of N");
        if (top_k < 1 || top_k > n_experts)
            throw InvalidInput("LayerConfig: top_k must satisfy 1 <= k <= N");
        if (!(rho > 0.0)) throw InvalidInput("LayerConfig: rho must be positive");
        if (!(eta > 0.0)) throw InvalidInput("LayerConfig: eta must be positive");
        if (scale.mode == ScaleSpec::Mode::Fixed && !(scale.value > 0.0))
            throw InvalidInput("LayerConfig: fixed scale must be positive");
        if (balance_coefficient < 0.0)
            throw InvalidInput("LayerConfig: balance coefficient must be >= 0");
    }

    double resolve_scale() const {
        switch (scale.mode) {
            case ScaleSpec::Mode::Fixed: return scale.value;
            case ScaleSpec::Mode::Auto: return optimal_scale(n, total_rank, eta);
            case ScaleSpec::Mode::AutoPerExpert: return optimal_scale(n, expert_width(), eta);
        }
        return scale.value;
    }

    GateConfig gate() const { return GateConfig{n_experts, top_k, balance_coefficient}; }
};

struct SpectralMoeLayer {
    LayerConfig config;
    double s = 1.0;       // resolved layer scale
    Matrix base;          // frozen: W0 - W_res
    Matrix residual;      // frozen: W_res (kept for audit)
    std::vector<ExpertAdapter> experts;  // trainable
    RouterState router;                  // trainable

    Index input_dim() const { return base.cols(); }
    Index output_dim() const { return base.rows(); }

    double expert_scale(Index i) const {
        return experts[static_cast<std::size_t>(i)].scale.value_or(s);
    }

    Matrix original_weight() const { return base + residual; }
};

inline SpectralMoeLayer init_layer(const Matrix& w0, const LayerConfig& config,
                                   std::uint64_t seed) {
    config.validate();
    if (w0.rows() != config.m || w0.cols() != config.n)
        throw InvalidInput("init_layer: weight shape does not match config");
    SpectralMoeLayer layer;
    layer.config = config;
    layer.s = config.resolve_scale();

    const Index d = config.expert_width();
    if (config.spectral_init) {
        SvdFactors factors = svd_decompose(w0);
        std::vector<Index> starts =
            segment_starts(config.scheme, factors.rank(), config.n_experts, d);
        std::vector<SpectralSegment> segments;
        segments.reserve(starts.size());
        for (Index start : starts) segments.push_back(extract_segment(factors, start, d));

        std::vector<double> scales(segments.size(), layer.s);
        if (config.per_expert_scaling) {
            std::vector<double> masses;
            masses.reserve(segments.size());
            for (const SpectralSegment& seg : segments) masses.push_back(seg.spectral_mass);
            scales = expert_aligned_scales(masses, layer.s);
        }
        for (std::size_t i = 0; i < segments.size(); ++i) {
            ExpertAdapter e = build_expert(segments[i], scales[i], config.rho);
            if (config.per_expert_scaling) e.scale = scales[i];
            layer.experts.push_back(std::move(e));
        }
    } else {
        Rng rng = make_rng(seed, 1);
        for (Index i = 0; i < config.n_experts; ++i)
            layer.experts.push_back(zero_init_adapter(config.m, config.n, d, rng));
    }

    layer.residual = residual_compensation(layer.experts, layer.s, config.n_experts);
    layer.base = w0 - layer.residual;

    Rng router_rng = make_rng(seed, 2);
    if (config.router_init == LayerConfig::RouterInit::Symmetric) {
        layer.router.w = config.router_std * random_orthonormal(config.n, config.n_experts, router_rng);
    } else {
        layer.router.w = gaussian_matrix(config.n, config.n_experts, router_rng, config.router_std);
    }
    return layer;
}

struct ForwardResult {
    Vector y;
    GateOutput gate;
};

inline ForwardResult forward(const SpectralMoeLayer& layer, const Vector& x) {
    if (x.size() != layer.input_dim()) throw InvalidInput("forward: input dimension mismatch");
    ForwardResult out;
    out.gate = topk_gate(layer.router, x, layer.config.gate());
    out.y = layer.base * x;
    for (Index i : out.gate.selected) {
        const ExpertAdapter& e = layer.experts[static_cast<std::size_t>(i)];
        out.y += out.gate.weights(i) * layer.expert_scale(i) * (e.b * (e.a * x));
    }
    return out;
}

// Gradients of f(theta) = upstream^T y(theta) [+ lambda * l_b(theta)] for a
// fixed upstream vector. Unselected experts get exact zeros.
struct LayerGradients {
    std::vector<Matrix> grad_b;
    std::vector<Matrix> grad_a;
    Matrix grad_router;
    double balance_contribution = 0.0;  // per-sample l_b = (N/k) sum_{i in S} p_i
    GateOutput gate;
};

inline LayerGradients backward(const SpectralMoeLayer& layer, const Vector& x,
                               const Vector& upstream, bool include_balance) {
    if (x.size() != layer.input_dim() || upstream.size() != layer.output_dim())
        throw InvalidInput("backward: dimension mismatch");
    const Index n_experts = layer.config.n_experts;
    LayerGradients g;
    g.gate = topk_gate(layer.router, x, layer.config.gate());
    g.grad_b.reserve(static_cast<std::size_t>(n_experts));
    g.grad_a.reserve(static_cast<std::size_t>(n_experts));
    for (Index i = 0; i < n_experts; ++i) {
        const ExpertAdapter& e = layer.experts[static_cast<std::size_t>(i)];
        g.grad_b.push_back(Matrix::Zero(e.b.rows(), e.b.cols()));
        g.grad_a.push_back(Matrix::Zero(e.a.rows(), e.a.cols()));
    }

    // Adapter gradients and the per-selected-expert output sensitivities
    // c_i = upstream^T (s_i b_i a_i x).
    Vector c = Vector::Zero(n_experts);
    for (Index i : g.gate.selected) {
        const ExpertAdapter& e = layer.experts[static_cast<std::size_t>(i)];
        const double si = layer.expert_scale(i);
        const double ri = g.gate.weights(i);
        Vector ax = e.a * x;
        c(i) = si * upstream.dot(e.b * ax);
        g.grad_b[static_cast<std::size_t>(i)] = ri * si * upstream * ax.transpose();
        g.grad_a[static_cast<std::size_t>(i)] =
            ri * si * (e.b.transpose() * upstream) * x.transpose();
    }

    // Router path through the renormalized top-k softmax: for j in S,
    // dL/dz_j = R_j (c_j - sum_i R_i c_i); zero outside S.
    Vector grad_z = Vector::Zero(n_experts);
    double weighted = 0.0;
    for (Index i : g.gate.selected) weighted += g.gate.weights(i) * c(i);
    for (Index j : g.gate.selected) grad_z(j) = g.gate.weights(j) * (c(j) - weighted);

    // Per-sample balance term (T = 1): l_b = (N/k) sum_{i in S} p_i. The load
    // fraction f is piecewise constant in z, so a.e. the gradient flows
    // through the dense probabilities only.
    const double nk = static_cast<double>(n_experts) / static_cast<double>(layer.config.top_k);
    double p_selected = 0.0;
    for (Index i : g.gate.selected) p_selected += g.gate.dense_probs(i);
    g.balance_contribution = nk * p_selected;
    if (include_balance && layer.config.balance_coefficient > 0.0) {
        const double lambda = layer.config.balance_coefficient;
        for (Index j = 0; j < n_experts; ++j) {
            const bool in_s =
                std::find(g.gate.selected.begin(), g.gate.selected.end(), j) != g.gate.selected.end();
            grad_z(j) += lambda * nk * g.gate.dense_probs(j) * ((in_s ? 1.0 : 0.0) - p_selected);
        }
    }
    g.grad_router = x * grad_z.transpose();
    return g;
}

// Per-input equivalent weight W~(x) = base + sum_i R(x)_i s_i b_i a_i.
inline Matrix equivalent_weight(const SpectralMoeLayer& layer, const Vector& x) {
    GateOutput gate = topk_gate(layer.router, x, layer.config.gate());
    Matrix w = layer.base;
    for (Index i : gate.selected) {
        const ExpertAdapter& e = layer.experts[static_cast<std::size_t>(i)];
        w += gate.weights(i) * layer.expert_scale(i) * (e.b * e.a);
    }
    return w;
}

// Expectation form under exchangeable gating, E[R_i] = 1/N:
// base + (1/N) sum_i s_i b_i a_i.
inline Matrix equivalent_weight_expected(const SpectralMoeLayer& layer) {
    Matrix w = layer.base;
    for (Index i = 0; i < layer.config.n_experts; ++i) {
        const ExpertAdapter& e = layer.experts[static_cast<std::size_t>(i)];
        w += layer.expert_scale(i) / static_cast<double>(layer.config.n_experts) * (e.b * e.a);
    }
    return w;
}

// Empirical residual estimate s E_x[sum_i R(x)_i b_i a_i]; verification-suite
// companion to the closed form.
inline Matrix residual_compensation_empirical(const SpectralMoeLayer& layer, Index samples,
                                              std::uint64_t seed) {
    if (samples < 1) throw InvalidInput("residual_compensation_empirical: samples >= 1");
    Rng rng = make_rng(seed);
    Matrix acc = Matrix::Zero(layer.output_dim(), layer.input_dim());
    for (Index t = 0; t < samples; ++t) {
        Vector x = gaussian_vector(layer.input_dim(), rng);
        GateOutput gate = topk_gate(layer.router, x, layer.config.gate());
        for (Index i : gate.selected) {
            const ExpertAdapter& e = layer.experts[static_cast<std::size_t>(i)];
            acc += gate.weights(i) * layer.expert_scale(i) * (e.b * e.a);
        }
    }
    return acc / static_cast<double>(samples);
}

// Effective full-rank gradient implied by low-rank factors:
// g~ = s^2 (b b^T g + g a^T a).
inline Matrix equivalent_gradient_surrogate(const Matrix& b, const Matrix& a, const Matrix& g,
                                            double s) {
    if (b.rows() != g.rows() || a.cols() != g.cols() || b.cols() != a.rows())
        throw InvalidInput("equivalent_gradient_surrogate: shapes do not compose");
    return s * s * (b * (b.transpose() * g) + (g * a.transpose()) * a);
}

// One SGD step on the selected experts' factors (router frozen) under the
// squared-error loss 1/2 ||y - target||^2; returns
// ||dW~ + lr * sum_i R_i g~_i|| / ||lr * sum_i R_i g~_i||, which is O(lr)
// because the factor product is bilinear.
inline double first_order_update_check(const SpectralMoeLayer& layer, const Vector& x,
                                       const Vector& target, double lr) {
    ForwardResult f = forward(layer, x);
    Vector upstream = f.y - target;
    LayerGradients grads = backward(layer, x, upstream, false);

    const Matrix g_full = upstream * x.transpose();
    Matrix predicted = Matrix::Zero(layer.output_dim(), layer.input_dim());
    for (Index i : f.gate.selected) {
        const ExpertAdapter& e = layer.experts[static_cast<std::size_t>(i)];
        const Matrix g_i = f.gate.weights(i) * g_full;
        predicted += f.gate.weights(i) *
                     equivalent_gradient_surrogate(e.b, e.a, g_i, layer.expert_scale(i));
    }

    SpectralMoeLayer stepped = layer;
    for (Index i : f.gate.selected) {
        ExpertAdapter& e = stepped.experts[static_cast<std::size_t>(i)];
        e.b -= lr * grads.grad_b[static_cast<std::size_t>(i)];
        e.a -= lr * grads.grad_a[static_cast<std::size_t>(i)];
    }
    Matrix delta = equivalent_weight(stepped, x) - equivalent_weight(layer, x);
    double denom = (lr * predicted).norm();
    if (denom == 0.0) return delta.norm();
    return (delta + lr * predicted).norm() / denom;
}

struct ScalingAlignmentResult {
    double s_star = 0.0;
    double diag_rel_error = 0.0;   // ||diag(s^2 M) - eta 1||_2 / ||eta 1||_2
    double offdiag_rms = 0.0;      // reported alongside; Monte Carlo noise floor
    Index draws = 0;
};

// Samples zero-init adapters A0 (entries uniform with variance 1/(3n)),
// accumulates M = mean(A0^T A0), and measures how far s^2 M is from eta I on
// the identity component. With s = s*, E[s^2 M] = eta I exactly.
inline ScalingAlignmentResult scaling_alignment_check_scaled(Index n, Index r, double eta,
                                                             double s, Index draws,
                                                             std::uint64_t seed) {
    if (draws < 1) throw InvalidInput("scaling_alignment_check: draws must be >= 1");
    Rng rng = make_rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(n));
    Matrix m = Matrix::Zero(n, n);
    for (Index t = 0; t < draws; ++t) {
        Matrix a0 = uniform_matrix(r, n, rng, bound);
        m.selfadjointView<Eigen::Lower>().rankUpdate(a0.transpose(), 1.0);
    }
    m = Matrix(m.selfadjointView<Eigen::Lower>()) / static_cast<double>(draws);

    ScalingAlignmentResult res;
    res.s_star = s;
    res.draws = draws;
    const Matrix scaled = s * s * m;
    const Vector diag = scaled.diagonal();
    res.diag_rel_error = (diag.array() - eta).matrix().norm() /
                         (eta * std::sqrt(static_cast<double>(n)));
    const Matrix off = scaled - Matrix(diag.asDiagonal());
    res.offdiag_rms = std::sqrt(off.squaredNorm() / static_cast<double>(n * (n - 1)));
    return res;
}

inline ScalingAlignmentResult scaling_alignment_check(Index n, Index r, double eta, Index draws,
                                                      std::uint64_t seed) {
    return scaling_alignment_check_scaled(n, r, eta, optimal_scale(n, r, eta), draws, seed);
}

// ---------------------------------------------------------------------------
// Checkpoint container: versioned binary, raw little-endian doubles, so
// round-trips are bit-exact for every payload.

namespace detail {

constexpr char kCheckpointMagic[8] = {'S', 'M', 'O', 'E', 'L', 'Y', 'R', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    write_bytes(os, &v, sizeof(T));
}

inline void write_matrix(std::ostream& os, const Matrix& m) {
    const std::int64_t rows = m.rows(), cols = m.cols();
    write_pod(os, rows);
    write_pod(os, cols);
    write_bytes(os, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
}

inline void write_vector(std::ostream& os, const Vector& v) {
    const std::int64_t size = v.size();
    write_pod(os, size);
    write_bytes(os, v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
    if (!is.read(static_cast<char*>(p), static_cast<std::streamsize>(n)))
        throw InvalidInput("checkpoint: truncated file");
}

template <typename T>
T read_pod(std::istream& is) {
    T v;
    read_bytes(is, &v, sizeof(T));
    return v;
}

inline Matrix read_matrix(std::istream& is) {
    const auto rows = read_pod<std::int64_t>(is);
    const auto cols = read_pod<std::int64_t>(is);
    if (rows < 0 || cols < 0) throw InvalidInput("checkpoint: bad matrix header");
    Matrix m(rows, cols);
    read_bytes(is, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    return m;
}

inline Vector read_vector(std::istream& is) {
    const auto size = read_pod<std::int64_t>(is);
    if (size < 0) throw InvalidInput("checkpoint: bad vector header");
    Vector v(size);
    read_bytes(is, v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
    return v;
}

}  // namespace detail

inline void save_layer(const SpectralMoeLayer& layer, std::ostream& os) {
    using namespace detail;
    write_bytes(os, kCheckpointMagic, sizeof(kCheckpointMagic));
    write_pod(os, kCheckpointVersion);
    const LayerConfig& c = layer.config;
    write_pod<std::int64_t>(os, c.m);
    write_pod<std::int64_t>(os, c.n);
    write_pod<std::int64_t>(os, c.total_rank);
    write_pod<std::int64_t>(os, c.n_experts);
    write_pod<std::int64_t>(os, c.top_k);
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(c.scheme.variant));
    write_pod<std::uint64_t>(os, c.scheme.seed);
    write_pod<double>(os, layer.s);
    write_pod<double>(os, c.rho);
    write_pod<double>(os, c.eta);
    write_pod<std::uint8_t>(os, c.per_expert_scaling ? 1 : 0);
    write_pod<std::uint8_t>(os, c.spectral_init ? 1 : 0);
    write_pod<double>(os, c.balance_coefficient);
    write_matrix(os, layer.base);
    write_matrix(os, layer.residual);
    write_pod<std::int64_t>(os, static_cast<std::int64_t>(layer.experts.size()));
    for (const ExpertAdapter& e : layer.experts) {
        write_matrix(os, e.b);
        write_matrix(os, e.a);
        write_pod<std::uint8_t>(os, e.segment.has_value() ? 1 : 0);
        if (e.segment) {
            write_pod<std::int64_t>(os, e.segment->start);
            write_pod<std::int64_t>(os, e.segment->width);
            write_pod<double>(os, e.segment->spectral_mass);
            write_matrix(os, e.segment->u_seg);
            write_vector(os, e.segment->s_seg);
            write_matrix(os, e.segment->v_seg);
        }
        write_pod<std::uint8_t>(os, e.scale.has_value() ? 1 : 0);
        if (e.scale) write_pod<double>(os, *e.scale);
    }
    write_matrix(os, layer.router.w);
    if (!os) throw NumericalFailure("save_layer: write failed");
}

inline SpectralMoeLayer load_layer(std::istream& is) {
    using namespace detail;
    char magic[8];
    read_bytes(is, magic, sizeof(magic));
    if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw InvalidInput("load_layer: bad magic");
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw InvalidInput("load_layer: unsupported checkpoint version");
    SpectralMoeLayer layer;
    LayerConfig& c = layer.config;
    c.m = static_cast<Index>(read_pod<std::int64_t>(is));
    c.n = static_cast<Index>(read_pod<std::int64_t>(is));
    c.total_rank = static_cast<Index>(read_pod<std::int64_t>(is));
    c.n_experts = static_cast<Index>(read_pod<std::int64_t>(is));
    c.top_k = static_cast<Index>(read_pod<std::int64_t>(is));
    c.scheme.variant = static_cast<SegmentScheme::Variant>(read_pod<std::uint8_t>(is));
    c.scheme.seed = read_pod<std::uint64_t>(is);
    layer.s = read_pod<double>(is);
    c.scale = ScaleSpec::fixed(layer.s);
    c.rho = read_pod<double>(is);
    c.eta = read_pod<double>(is);
    c.per_expert_scaling = read_pod<std::uint8_t>(is) != 0;
    c.spectral_init = read_pod<std::uint8_t>(is) != 0;
    c.balance_coefficient = read_pod<double>(is);
    layer.base = read_matrix(is);
    layer.residual = read_matrix(is);
    const auto n_experts = read_pod<std::int64_t>(is);
    if (n_experts != c.n_experts) throw InvalidInput("load_layer: expert count mismatch");
    layer.experts.resize(static_cast<std::size_t>(n_experts));
    for (ExpertAdapter& e : layer.experts) {
        e.b = read_matrix(is);
        e.a = read_matrix(is);
        if (read_pod<std::uint8_t>(is) != 0) {
            SpectralSegment seg;
            seg.start = static_cast<Index>(read_pod<std::int64_t>(is));
            seg.width = static_cast<Index>(read_pod<std::int64_t>(is));
            seg.spectral_mass = read_pod<double>(is);
            seg.u_seg = read_matrix(is);
            seg.s_seg = read_vector(is);
            seg.v_seg = read_matrix(is);
            e.segment = std::move(seg);
        }
        if (read_pod<std::uint8_t>(is) != 0) e.scale = read_pod<double>(is);
    }
    layer.router.w = read_matrix(is);
    return layer;
}

inline void save_layer_file(const SpectralMoeLayer& layer, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("save_layer_file: cannot open " + path);
    save_layer(layer, os);
}

inline SpectralMoeLayer load_layer_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("load_layer_file: cannot open " + path);
    return load_layer(is);
}

}  // namespace smoe

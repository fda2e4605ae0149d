// spectral.hpp -- SVD decomposition of pretrained weights, segment-scheme
// selection, expert factor construction, and residual compensation.
#pragma once

#include "smoe/core.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

namespace smoe {

// Thin SVD of a weight matrix. u: m x h, s: h (descending, >= 0), v: n x h,
// with h = min(m, n) and w = u * diag(s) * v^T.
struct SvdFactors {
    Matrix u;
    Vector s;
    Matrix v;

    Index rows() const { return u.rows(); }
    Index cols() const { return v.rows(); }
    Index rank() const { return s.size(); }

    Matrix reconstruct() const { return u * s.asDiagonal() * v.transpose(); }
};

inline SvdFactors svd_decompose(const Matrix& w) {
    if (w.size() == 0) throw InvalidInput("svd_decompose: empty matrix");
    if (!w.allFinite()) throw InvalidInput("svd_decompose: non-finite entries");
    const Index h = std::min(w.rows(), w.cols());
    SvdFactors f;
    if (h > 128) {
        Eigen::BDCSVD<Matrix> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
        if (svd.info() != Eigen::Success)
            throw NumericalFailure("svd_decompose: BDCSVD did not converge");
        f.u = svd.matrixU();
        f.s = svd.singularValues();
        f.v = svd.matrixV();
    } else {
        Eigen::JacobiSVD<Matrix> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
        if (svd.info() != Eigen::Success)
            throw NumericalFailure("svd_decompose: JacobiSVD did not converge");
        f.u = svd.matrixU();
        f.s = svd.singularValues();
        f.v = svd.matrixV();
    }
    return f;
}

// Segment placement over the singular spectrum. Original spreads experts
// evenly over the whole spectrum, Principal packs them at the top, Minor at
// the bottom, Random draws distinct width-d blocks without replacement.
struct SegmentScheme {
    enum class Variant { Original, Principal, Minor, Random };
    Variant variant = Variant::Original;
    std::uint64_t seed = 0;  // used by Random only

    static SegmentScheme original() { return {Variant::Original, 0}; }
    static SegmentScheme principal() { return {Variant::Principal, 0}; }
    static SegmentScheme minor() { return {Variant::Minor, 0}; }
    static SegmentScheme random(std::uint64_t seed) { return {Variant::Random, seed}; }
};

inline const char* to_string(SegmentScheme::Variant v) {
    switch (v) {
        case SegmentScheme::Variant::Original: return "original";
        case SegmentScheme::Variant::Principal: return "principal";
        case SegmentScheme::Variant::Minor: return "minor";
        case SegmentScheme::Variant::Random: return "random";
    }
    return "?";
}

// Start indices for N width-d segments of an h-long spectrum, in expert order.
inline std::vector<Index> segment_starts(const SegmentScheme& scheme, Index h,
                                         Index n_experts, Index d) {
    if (n_experts < 1 || d < 1) throw InvalidInput("segment_starts: N and d must be positive");
    if (n_experts * d > h)
        throw InsufficientRank("segment_starts: N*d exceeds spectrum length h");
    std::vector<Index> starts(static_cast<std::size_t>(n_experts));
    switch (scheme.variant) {
        case SegmentScheme::Variant::Original: {
            if (h % n_experts != 0)
                throw InvalidInput("segment_starts: Original scheme requires h divisible by N");
            const Index t = h / n_experts;
            for (Index j = 0; j < n_experts; ++j) starts[j] = j * t;
            break;
        }
        case SegmentScheme::Variant::Principal:
            for (Index j = 0; j < n_experts; ++j) starts[j] = j * d;
            break;
        case SegmentScheme::Variant::Minor:
            for (Index j = 0; j < n_experts; ++j) starts[j] = h - (j + 1) * d;
            break;
        case SegmentScheme::Variant::Random: {
            const Index blocks = h / d;
            std::vector<Index> pool(static_cast<std::size_t>(blocks));
            std::iota(pool.begin(), pool.end(), Index{0});
            Rng rng = make_rng(scheme.seed);
            // Fisher-Yates prefix: N distinct block indices without replacement.
            for (Index j = 0; j < n_experts; ++j) {
                std::uniform_int_distribution<Index> pick(j, blocks - 1);
                std::swap(pool[j], pool[pick(rng)]);
                starts[j] = pool[j] * d;
            }
            break;
        }
    }
    return starts;
}

// One expert's contiguous slice of the spectrum plus its spectral mass
// (sum of singular values in the slice).
struct SpectralSegment {
    Index start = 0;
    Index width = 0;
    Matrix u_seg;   // m x d
    Vector s_seg;   // d
    Matrix v_seg;   // n x d
    double spectral_mass = 0.0;

    Matrix product() const { return u_seg * s_seg.asDiagonal() * v_seg.transpose(); }
};

inline SpectralSegment extract_segment(const SvdFactors& factors, Index start, Index width) {
    if (start < 0 || width < 1 || start + width > factors.rank())
        throw InvalidInput("extract_segment: slice out of range");
    SpectralSegment seg;
    seg.start = start;
    seg.width = width;
    seg.u_seg = factors.u.middleCols(start, width);
    seg.s_seg = factors.s.segment(start, width);
    seg.v_seg = factors.v.middleCols(start, width);
    seg.spectral_mass = seg.s_seg.sum();
    return seg;
}

// One expert's low-rank pair. For spectral init, s * rho * b * a reproduces
// the segment product; the nullopt segment marks zero-initialized experts.
struct ExpertAdapter {
    Matrix b;  // m x d
    Matrix a;  // d x n
    std::optional<SpectralSegment> segment;
    std::optional<double> scale;  // per-expert s; layer scale when absent

    Index width() const { return b.cols(); }
    Matrix product() const { return b * a; }
};

// Damped spectral init: b = sqrt(1/(s*rho)) U' S'^{1/2},
// a = sqrt(1/(s*rho)) S'^{1/2} V'^T, so s * b * a = (1/rho) U' S' V'^T.
inline ExpertAdapter build_expert(const SpectralSegment& segment, double s, double rho) {
    if (!(s > 0.0) || !(rho > 0.0))
        throw InvalidInput("build_expert: scale and damping must be positive");
    const double c = std::sqrt(1.0 / (s * rho));
    const Vector root = segment.s_seg.cwiseSqrt();
    ExpertAdapter e;
    e.b = c * segment.u_seg * root.asDiagonal();
    e.a = c * root.asDiagonal() * segment.v_seg.transpose();
    e.segment = segment;
    return e;
}

// Undamped single-adapter init (PiSSA/MiLoRA style): s * b * a reproduces the
// chosen width-r segment exactly.
inline ExpertAdapter single_lora_init(const SvdFactors& factors, Index start, Index width,
                                      double s) {
    if (!(s > 0.0)) throw InvalidInput("single_lora_init: scale must be positive");
    return build_expert(extract_segment(factors, start, width), s, 1.0);
}

// Zero init (LoRA convention): b = 0, a entries uniform with variance 1/(3n),
// i.e. bound 1/sqrt(n).
inline ExpertAdapter zero_init_adapter(Index m, Index n, Index d, Rng& rng) {
    ExpertAdapter e;
    e.b = Matrix::Zero(m, d);
    e.a = uniform_matrix(d, n, rng, 1.0 / std::sqrt(static_cast<double>(n)));
    e.segment = std::nullopt;
    return e;
}

// Closed-form residual W_res^+ = (1/N) sum_i s_i b_i a_i, with s_i the
// expert's own scale when set and the layer scale otherwise.
inline Matrix residual_compensation(const std::vector<ExpertAdapter>& experts, double s,
                                    Index n_experts) {
    if (experts.empty()) throw InvalidInput("residual_compensation: empty expert list");
    if (static_cast<Index>(experts.size()) != n_experts)
        throw InvalidInput("residual_compensation: expert count mismatch");
    Matrix acc = Matrix::Zero(experts.front().b.rows(), experts.front().a.cols());
    for (const ExpertAdapter& e : experts) {
        if (e.b.rows() != acc.rows() || e.a.cols() != acc.cols())
            throw InvalidInput("residual_compensation: inconsistent expert dimensions");
        acc += (e.scale.value_or(s)) * (e.b * e.a);
    }
    return acc / static_cast<double>(n_experts);
}

}  // namespace smoe

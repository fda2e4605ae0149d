// training.hpp -- synthetic teacher tasks, the SGD training loop, the
// sequential-task forgetting protocol, and the expert-count sweep.
#pragma once

#include "smoe/core.hpp"
#include "smoe/moe_layer.hpp"
#include "smoe/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace smoe {

// Teacher for y = w_star x + noise. Inputs are isotropic Gaussian; when
// input_basis is set they are isotropic inside that subspace plus a small
// ambient component, which is how sequential tasks emulate domain shift.
struct TeacherTask {
    Matrix w_star;
    std::optional<Matrix> input_basis;  // n x p, orthonormal columns
    double ambient_std = 0.0;
    double noise_std = 0.0;
    std::uint64_t seed = 0;

    Index input_dim() const { return w_star.cols(); }
    Index output_dim() const { return w_star.rows(); }

    Vector draw_input(Rng& rng) const {
        if (!input_basis) return gaussian_vector(w_star.cols(), rng);
        Vector z = gaussian_vector(input_basis->cols(), rng);
        Vector x = (*input_basis) * z;
        if (ambient_std > 0.0) x += ambient_std * gaussian_vector(w_star.cols(), rng);
        return x;
    }

    Vector target(const Vector& x, Rng& rng) const {
        Vector t = w_star * x;
        if (noise_std > 0.0) t += noise_std * gaussian_vector(w_star.rows(), rng);
        return t;
    }
};

enum class SpectrumProfile { Flat, PowerLawDecay, SegmentConcentrated };

struct SpectrumSpec {
    SpectrumProfile profile = SpectrumProfile::Flat;
    double smax = 1.0;
    double smin = 1.0;          // linear floor for Flat; unused by PowerLawDecay
    double decay_alpha = 0.5;   // sigma_i = smax * (i+1)^{-alpha}
    Index band_start = 0;       // SegmentConcentrated band
    Index band_width = 1;
    double band_fraction = 0.95;  // fraction of spectral energy inside the band
};

inline Vector build_spectrum(const SpectrumSpec& spec, Index h) {
    Vector sv(h);
    switch (spec.profile) {
        case SpectrumProfile::Flat:
            for (Index i = 0; i < h; ++i)
                sv(i) = spec.smax + (spec.smin - spec.smax) * static_cast<double>(i) /
                                        static_cast<double>(std::max<Index>(h - 1, 1));
            break;
        case SpectrumProfile::PowerLawDecay:
            for (Index i = 0; i < h; ++i)
                sv(i) = spec.smax * std::pow(static_cast<double>(i + 1), -spec.decay_alpha);
            break;
        case SpectrumProfile::SegmentConcentrated: {
            if (spec.band_start < 0 || spec.band_width < 1 ||
                spec.band_start + spec.band_width > h)
                throw InvalidInput("build_spectrum: band out of range");
            // Amplitudes chosen so the band carries band_fraction of the
            // total squared spectral energy, spread evenly elsewhere.
            const double in2 = spec.band_fraction;
            const double out2 = 1.0 - spec.band_fraction;
            const double band_amp =
                spec.smax * std::sqrt(in2 / static_cast<double>(spec.band_width));
            const double rest = static_cast<double>(h - spec.band_width);
            const double out_amp =
                rest > 0 ? spec.smax * std::sqrt(out2 / rest) : 0.0;
            for (Index i = 0; i < h; ++i) {
                const bool in_band = i >= spec.band_start && i < spec.band_start + spec.band_width;
                sv(i) = in_band ? band_amp : out_amp;
            }
            std::sort(sv.data(), sv.data() + sv.size(), std::greater<double>());
            break;
        }
    }
    return sv;
}

inline TeacherTask make_teacher_task(Index m, Index n, const SpectrumSpec& spectrum,
                                     double noise_std, std::uint64_t seed) {
    if (m < 1 || n < 1) throw InvalidInput("make_teacher_task: dimensions must be positive");
    if (noise_std < 0.0) throw InvalidInput("make_teacher_task: noise_std must be >= 0");
    Rng rng = make_rng(seed);
    const Index h = std::min(m, n);
    Matrix u = random_orthonormal(m, h, rng);
    Matrix v = random_orthonormal(n, h, rng);
    Vector sv = build_spectrum(spectrum, h);
    TeacherTask task;
    task.w_star = u * sv.asDiagonal() * v.transpose();
    task.noise_std = noise_std;
    task.seed = seed;
    return task;
}

// Adaptation target coupled to a pretrained weight: the chosen spectral band
// of w0 is amplified by `gain`, so the required update lives inside that
// band's singular subspaces.
inline TeacherTask make_adaptation_task(const Matrix& w0, Index band_start, Index band_width,
                                        double gain, double noise_std, std::uint64_t seed) {
    SvdFactors f = svd_decompose(w0);
    SpectralSegment band = extract_segment(f, band_start, band_width);
    TeacherTask task;
    task.w_star = w0 + (gain - 1.0) * band.product();
    task.noise_std = noise_std;
    task.seed = seed;
    return task;
}

// A pretrained-mixture base plus per-task teachers whose dominant singular
// subspaces are exactly orthogonal across tasks. Each task also gets its own
// input subspace (dimension domain_dim) containing its right singular block.
struct SequentialTaskSet {
    Matrix w0;
    std::vector<TeacherTask> tasks;
};

struct SequentialTaskOptions {
    Index block_rank = 8;     // q: dominant rank per task
    Index domain_dim = 16;    // p: input-subspace dimension per task
    double top_sigma = 10.0;  // first task's dominant singular value
    double sigma_step = 2.0;  // drop per task so spectra stay disjoint
    double tail_max = 3.0;
    double tail_min = 0.3;
    double ambient_std = 0.15;
    double noise_std = 0.0;
};

inline SequentialTaskSet make_sequential_tasks(Index count, Index m, Index n, std::uint64_t seed,
                                               const SequentialTaskOptions& opt = {}) {
    if (count < 1) throw InvalidInput("make_sequential_tasks: count must be >= 1");
    const Index q = opt.block_rank, p = opt.domain_dim;
    if (q > p) throw InvalidInput("make_sequential_tasks: block rank exceeds domain dim");
    if (count * p > n || count * q > m)
        throw InvalidInput("make_sequential_tasks: too many tasks for the given dimensions");
    Rng rng = make_rng(seed);
    Matrix g = random_orthonormal(m, m, rng);
    Matrix h = random_orthonormal(n, n, rng);

    std::vector<Matrix> blocks;
    for (Index c = 0; c < count; ++c) {
        const double top = opt.top_sigma - opt.sigma_step * static_cast<double>(c);
        if (!(top > opt.tail_max))
            throw InvalidInput("make_sequential_tasks: task spectra would interleave the tail");
        Vector sv(q);
        for (Index i = 0; i < q; ++i)
            sv(i) = top - (opt.sigma_step / 2.0) * static_cast<double>(i) /
                              static_cast<double>(std::max<Index>(q - 1, 1));
        Matrix gc = g.middleCols(c * q, q);
        Matrix hc = h.middleCols(c * p, q);
        blocks.push_back(gc * sv.asDiagonal() * hc.transpose());
    }
    const Index tail_dims = std::min<Index>(m - count * q, n - count * p);
    Matrix tail = Matrix::Zero(m, n);
    if (tail_dims > 0) {
        Vector sv(tail_dims);
        for (Index i = 0; i < tail_dims; ++i)
            sv(i) = opt.tail_max + (opt.tail_min - opt.tail_max) * static_cast<double>(i) /
                                       static_cast<double>(std::max<Index>(tail_dims - 1, 1));
        tail = g.middleCols(count * q, tail_dims) * sv.asDiagonal() *
               h.middleCols(count * p, tail_dims).transpose();
    }

    SequentialTaskSet set;
    set.w0 = tail;
    for (const Matrix& b : blocks) set.w0 += 0.5 * b;
    for (Index c = 0; c < count; ++c) {
        TeacherTask task;
        task.w_star = set.w0 + 0.5 * blocks[static_cast<std::size_t>(c)];
        task.input_basis = h.middleCols(c * p, p);
        task.ambient_std = opt.ambient_std;
        task.noise_std = opt.noise_std;
        task.seed = mix_seed(seed, 10 + static_cast<std::uint64_t>(c));
        set.tasks.push_back(std::move(task));
    }
    return set;
}

// Largest principal-angle cosine between the dominant rank-q subspaces (left
// and right) of two teachers.
inline double dominant_subspace_overlap(const TeacherTask& a, const TeacherTask& b, Index q) {
    SvdFactors fa = svd_decompose(a.w_star);
    SvdFactors fb = svd_decompose(b.w_star);
    Matrix cu = fa.u.leftCols(q).transpose() * fb.u.leftCols(q);
    Matrix cv = fa.v.leftCols(q).transpose() * fb.v.leftCols(q);
    Eigen::JacobiSVD<Matrix> su(cu);
    Eigen::JacobiSVD<Matrix> sv(cv);
    return std::max(su.singularValues().maxCoeff(), sv.singularValues().maxCoeff());
}

enum class Optimizer { Sgd, SgdMomentum };

struct TrainConfig {
    double lr = 1e-3;
    Index steps = 100;
    Index batch_size = 16;
    std::uint64_t seed = 0;
    Optimizer optimizer = Optimizer::Sgd;
    double momentum = 0.9;
    double balance_coefficient = 1e-3;
    Index eval_every = 50;
    Index eval_samples = 256;

    void validate() const {
        if (!(lr > 0.0)) throw InvalidInput("TrainConfig: lr must be positive");
        if (steps < 1) throw InvalidInput("TrainConfig: steps must be >= 1");
        if (batch_size < 1) throw InvalidInput("TrainConfig: batch_size must be >= 1");
        if (eval_every < 1) throw InvalidInput("TrainConfig: eval_every must be >= 1");
    }
};

struct TrainLog {
    Index n_experts = 0;
    std::vector<double> task_loss;          // per step, batch mean
    std::vector<double> balance_loss;       // per step
    std::vector<double> adapter_grad_norm;  // per step
    std::vector<double> router_grad_norm;   // per step
    std::vector<Vector> load_fractions;     // per step, per expert
    std::vector<std::pair<Index, double>> evals;
    double final_eval = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

// Noiseless squared-error eval on a fixed input set drawn from the task.
template <typename ForwardFn>
double eval_mean_loss(const TeacherTask& task, const ForwardFn& fwd, Index samples,
                      std::uint64_t seed) {
    Rng rng = make_rng(seed, 777);
    double acc = 0.0;
    for (Index i = 0; i < samples; ++i) {
        Vector x = task.draw_input(rng);
        acc += 0.5 * (fwd(x) - task.w_star * x).squaredNorm();
    }
    return acc / static_cast<double>(samples);
}

struct MomentumState {
    std::vector<Matrix> buffers;
    bool initialized = false;

    void apply(std::vector<Matrix*> params, const std::vector<Matrix>& grads, double lr,
               double beta, bool use_momentum) {
        if (!use_momentum) {
            for (std::size_t i = 0; i < params.size(); ++i) *params[i] -= lr * grads[i];
            return;
        }
        if (!initialized) {
            buffers.clear();
            for (const Matrix& g : grads) buffers.push_back(Matrix::Zero(g.rows(), g.cols()));
            initialized = true;
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            buffers[i] = beta * buffers[i] + grads[i];
            *params[i] -= lr * buffers[i];
        }
    }
};

}  // namespace detail

inline TrainLog train(SpectralMoeLayer& layer, const TeacherTask& task, const TrainConfig& config) {
    config.validate();
    if (task.input_dim() != layer.input_dim() || task.output_dim() != layer.output_dim())
        throw InvalidInput("train: task and layer shapes do not match");
    const Index n_experts = layer.config.n_experts;
    const Index batch = config.batch_size;
    const GateConfig gate{n_experts, layer.config.top_k, config.balance_coefficient};
    TrainLog log;
    log.n_experts = n_experts;
    Rng data_rng = make_rng(config.seed, 1);
    Rng noise_rng = make_rng(config.seed, 2);
    detail::MomentumState momentum;
    const bool use_momentum = config.optimizer == Optimizer::SgdMomentum;

    for (Index step = 0; step < config.steps; ++step) {
        std::vector<Matrix> grad_b(static_cast<std::size_t>(n_experts));
        std::vector<Matrix> grad_a(static_cast<std::size_t>(n_experts));
        for (Index i = 0; i < n_experts; ++i) {
            const ExpertAdapter& e = layer.experts[static_cast<std::size_t>(i)];
            grad_b[static_cast<std::size_t>(i)] = Matrix::Zero(e.b.rows(), e.b.cols());
            grad_a[static_cast<std::size_t>(i)] = Matrix::Zero(e.a.rows(), e.a.cols());
        }
        Matrix grad_router = Matrix::Zero(layer.router.w.rows(), layer.router.w.cols());
        std::vector<Index> counts(static_cast<std::size_t>(n_experts), 0);
        Vector probs_mean = Vector::Zero(n_experts);
        std::vector<Vector> xs, probs;
        xs.reserve(static_cast<std::size_t>(batch));
        probs.reserve(static_cast<std::size_t>(batch));
        double loss_acc = 0.0;

        for (Index bI = 0; bI < batch; ++bI) {
            Vector x = task.draw_input(data_rng);
            Vector t = task.target(x, noise_rng);
            ForwardResult f = forward(layer, x);
            Vector upstream = f.y - t;
            loss_acc += 0.5 * upstream.squaredNorm();
            LayerGradients g = backward(layer, x, upstream, false);
            for (Index i : f.gate.selected) {
                grad_b[static_cast<std::size_t>(i)] += g.grad_b[static_cast<std::size_t>(i)];
                grad_a[static_cast<std::size_t>(i)] += g.grad_a[static_cast<std::size_t>(i)];
                counts[static_cast<std::size_t>(i)] += 1;
            }
            grad_router += g.grad_router;
            probs_mean += f.gate.dense_probs;
            xs.push_back(std::move(x));
            probs.push_back(f.gate.dense_probs);
        }
        probs_mean /= static_cast<double>(batch);
        const double task_loss = loss_acc / static_cast<double>(batch);
        if (!std::isfinite(task_loss))
            throw TrainingDiverged("train: non-finite loss", static_cast<std::size_t>(step));
        const double lb = balance_loss(counts, probs_mean, gate, batch);

        // Batch balance gradient through the mean probabilities; the load
        // fractions f_i act as constants.
        if (config.balance_coefficient > 0.0) {
            Vector f_load(n_experts);
            const double norm = static_cast<double>(n_experts) /
                                (static_cast<double>(gate.top_k) * static_cast<double>(batch));
            for (Index i = 0; i < n_experts; ++i)
                f_load(i) = norm * static_cast<double>(counts[static_cast<std::size_t>(i)]);
            for (Index bI = 0; bI < batch; ++bI) {
                const Vector& pv = probs[static_cast<std::size_t>(bI)];
                const double fp = f_load.dot(pv);
                Vector gz = (f_load.cwiseProduct(pv) - fp * pv) / static_cast<double>(batch);
                grad_router += config.balance_coefficient *
                               (xs[static_cast<std::size_t>(bI)] * gz.transpose());
            }
        }

        double adapter_norm2 = 0.0;
        for (Index i = 0; i < n_experts; ++i) {
            grad_b[static_cast<std::size_t>(i)] /= static_cast<double>(batch);
            grad_a[static_cast<std::size_t>(i)] /= static_cast<double>(batch);
            adapter_norm2 += grad_b[static_cast<std::size_t>(i)].squaredNorm() +
                             grad_a[static_cast<std::size_t>(i)].squaredNorm();
        }
        grad_router /= static_cast<double>(batch);

        std::vector<Matrix*> params;
        std::vector<Matrix> grads;
        for (Index i = 0; i < n_experts; ++i) {
            ExpertAdapter& e = layer.experts[static_cast<std::size_t>(i)];
            params.push_back(&e.b);
            grads.push_back(grad_b[static_cast<std::size_t>(i)]);
            params.push_back(&e.a);
            grads.push_back(grad_a[static_cast<std::size_t>(i)]);
        }
        params.push_back(&layer.router.w);
        grads.push_back(grad_router);
        momentum.apply(params, grads, config.lr, config.momentum, use_momentum);

        log.task_loss.push_back(task_loss);
        log.balance_loss.push_back(lb);
        log.adapter_grad_norm.push_back(std::sqrt(adapter_norm2));
        log.router_grad_norm.push_back(grad_router.norm());
        Vector loads(n_experts);
        for (Index i = 0; i < n_experts; ++i)
            loads(i) = static_cast<double>(counts[static_cast<std::size_t>(i)]) /
                       (static_cast<double>(gate.top_k) * static_cast<double>(batch));
        log.load_fractions.push_back(loads);
        if ((step + 1) % config.eval_every == 0 || step + 1 == config.steps) {
            const double ev = detail::eval_mean_loss(
                task, [&](const Vector& x) { return forward(layer, x).y; }, config.eval_samples,
                config.seed);
            log.evals.emplace_back(step + 1, ev);
        }
    }
    log.final_eval = log.evals.empty() ? std::numeric_limits<double>::quiet_NaN()
                                       : log.evals.back().second;
    return log;
}

inline TrainLog train(FullFtModel& model, const TeacherTask& task, const TrainConfig& config) {
    config.validate();
    if (task.input_dim() != model.w.cols() || task.output_dim() != model.w.rows())
        throw InvalidInput("train: task and model shapes do not match");
    TrainLog log;
    log.n_experts = 1;
    Rng data_rng = make_rng(config.seed, 1);
    Rng noise_rng = make_rng(config.seed, 2);
    detail::MomentumState momentum;
    const bool use_momentum = config.optimizer == Optimizer::SgdMomentum;
    for (Index step = 0; step < config.steps; ++step) {
        Matrix grad = Matrix::Zero(model.w.rows(), model.w.cols());
        double loss_acc = 0.0;
        for (Index bI = 0; bI < config.batch_size; ++bI) {
            Vector x = task.draw_input(data_rng);
            Vector t = task.target(x, noise_rng);
            Vector upstream = model.w * x - t;
            loss_acc += 0.5 * upstream.squaredNorm();
            grad += upstream * x.transpose();
        }
        grad /= static_cast<double>(config.batch_size);
        const double task_loss = loss_acc / static_cast<double>(config.batch_size);
        if (!std::isfinite(task_loss))
            throw TrainingDiverged("train: non-finite loss", static_cast<std::size_t>(step));
        momentum.apply({&model.w}, {grad}, config.lr, config.momentum, use_momentum);
        log.task_loss.push_back(task_loss);
        log.balance_loss.push_back(0.0);
        log.adapter_grad_norm.push_back(grad.norm());
        log.router_grad_norm.push_back(0.0);
        log.load_fractions.push_back(Vector::Ones(1));
        if ((step + 1) % config.eval_every == 0 || step + 1 == config.steps) {
            const double ev = detail::eval_mean_loss(
                task, [&](const Vector& x) { return Vector(model.w * x); }, config.eval_samples,
                config.seed);
            log.evals.emplace_back(step + 1, ev);
        }
    }
    log.final_eval = log.evals.back().second;
    return log;
}

inline TrainLog train(UpcycledMoeModel& model, const TeacherTask& task, const TrainConfig& config) {
    config.validate();
    const Index n_experts = model.config.n_experts;
    TrainLog log;
    log.n_experts = n_experts;
    Rng data_rng = make_rng(config.seed, 1);
    Rng noise_rng = make_rng(config.seed, 2);
    detail::MomentumState momentum;
    const bool use_momentum = config.optimizer == Optimizer::SgdMomentum;
    const GateConfig gate{n_experts, model.config.top_k, config.balance_coefficient};
    for (Index step = 0; step < config.steps; ++step) {
        std::vector<Matrix> grads(static_cast<std::size_t>(n_experts));
        for (Index i = 0; i < n_experts; ++i)
            grads[static_cast<std::size_t>(i)] =
                Matrix::Zero(model.experts.front().rows(), model.experts.front().cols());
        Matrix grad_router = Matrix::Zero(model.router.w.rows(), model.router.w.cols());
        std::vector<Index> counts(static_cast<std::size_t>(n_experts), 0);
        Vector probs_mean = Vector::Zero(n_experts);
        std::vector<Vector> xs, probs;
        double loss_acc = 0.0;
        for (Index bI = 0; bI < config.batch_size; ++bI) {
            Vector x = task.draw_input(data_rng);
            Vector t = task.target(x, noise_rng);
            UpcycledBackward back = upcycled_forward_backward(model, x, t, LossKind::SquaredError);
            loss_acc += back.loss;
            for (Index i : back.gate.selected) {
                grads[static_cast<std::size_t>(i)] += back.expert_grads[static_cast<std::size_t>(i)];
                counts[static_cast<std::size_t>(i)] += 1;
            }
            grad_router += back.router_grad;
            probs_mean += back.gate.dense_probs;
            xs.push_back(std::move(x));
            probs.push_back(back.gate.dense_probs);
        }
        probs_mean /= static_cast<double>(config.batch_size);
        const double task_loss = loss_acc / static_cast<double>(config.batch_size);
        if (!std::isfinite(task_loss))
            throw TrainingDiverged("train: non-finite loss", static_cast<std::size_t>(step));
        const double lb = balance_loss(counts, probs_mean, gate, config.batch_size);
        if (config.balance_coefficient > 0.0) {
            Vector f_load(n_experts);
            const double norm = static_cast<double>(n_experts) /
                                (static_cast<double>(gate.top_k) *
                                 static_cast<double>(config.batch_size));
            for (Index i = 0; i < n_experts; ++i)
                f_load(i) = norm * static_cast<double>(counts[static_cast<std::size_t>(i)]);
            for (std::size_t bI = 0; bI < xs.size(); ++bI) {
                const Vector& pv = probs[bI];
                const double fp = f_load.dot(pv);
                Vector gz = (f_load.cwiseProduct(pv) - fp * pv) /
                            static_cast<double>(config.batch_size);
                grad_router += config.balance_coefficient * (xs[bI] * gz.transpose());
            }
        }
        double expert_norm2 = 0.0;
        std::vector<Matrix*> params;
        std::vector<Matrix> step_grads;
        for (Index i = 0; i < n_experts; ++i) {
            grads[static_cast<std::size_t>(i)] /= static_cast<double>(config.batch_size);
            expert_norm2 += grads[static_cast<std::size_t>(i)].squaredNorm();
            params.push_back(&model.experts[static_cast<std::size_t>(i)]);
            step_grads.push_back(grads[static_cast<std::size_t>(i)]);
        }
        grad_router /= static_cast<double>(config.batch_size);
        params.push_back(&model.router.w);
        step_grads.push_back(grad_router);
        momentum.apply(params, step_grads, config.lr, config.momentum, use_momentum);

        log.task_loss.push_back(task_loss);
        log.balance_loss.push_back(lb);
        log.adapter_grad_norm.push_back(std::sqrt(expert_norm2));
        log.router_grad_norm.push_back(grad_router.norm());
        Vector loads(n_experts);
        for (Index i = 0; i < n_experts; ++i)
            loads(i) = static_cast<double>(counts[static_cast<std::size_t>(i)]) /
                       (static_cast<double>(gate.top_k) * static_cast<double>(config.batch_size));
        log.load_fractions.push_back(loads);
        if ((step + 1) % config.eval_every == 0 || step + 1 == config.steps) {
            const double ev = detail::eval_mean_loss(
                task, [&](const Vector& x) { return model.forward(x); }, config.eval_samples,
                config.seed);
            log.evals.emplace_back(step + 1, ev);
        }
    }
    log.final_eval = log.evals.back().second;
    return log;
}

enum class AdapterMethod { SingleLora, ZeroInitMoe, SpectralMoe, SpectralMoeDense };

inline const char* to_string(AdapterMethod m) {
    switch (m) {
        case AdapterMethod::SingleLora: return "single-lora";
        case AdapterMethod::ZeroInitMoe: return "zero-init-moe";
        case AdapterMethod::SpectralMoe: return "spectral-moe";
        case AdapterMethod::SpectralMoeDense: return "spectral-moe-dense";
    }
    return "?";
}

inline AdapterMethod adapter_method_from_string(const std::string& s) {
    if (s == "single-lora") return AdapterMethod::SingleLora;
    if (s == "zero-init-moe") return AdapterMethod::ZeroInitMoe;
    if (s == "spectral-moe") return AdapterMethod::SpectralMoe;
    if (s == "spectral-moe-dense") return AdapterMethod::SpectralMoeDense;
    throw InvalidInput("unknown adapter method: " + s);
}

// Resolve a method variant against the shared MoE template: single-lora keeps
// the full rank in one undamped principal adapter, zero-init drops the
// spectral prior, the dense variant activates every expert.
inline LayerConfig method_layer_config(AdapterMethod method, const LayerConfig& moe_template) {
    LayerConfig c = moe_template;
    switch (method) {
        case AdapterMethod::SpectralMoe:
            break;
        case AdapterMethod::SpectralMoeDense:
            c.top_k = c.n_experts;
            break;
        case AdapterMethod::ZeroInitMoe:
            c.spectral_init = false;
            break;
        case AdapterMethod::SingleLora:
            c.n_experts = 1;
            c.top_k = 1;
            c.rho = 1.0;
            c.scheme = SegmentScheme::principal();
            if (c.scale.mode == ScaleSpec::Mode::AutoPerExpert) c.scale = ScaleSpec::automatic();
            break;
    }
    return c;
}

struct RetentionReport {
    AdapterMethod method;
    std::vector<std::string> task_names;
    // loss(p, t): eval loss of task t after phase p; phase 0 is initialization.
    Matrix loss;
    // retention(p, t) = 1 - loss(p, t) / loss(0, t)
    Matrix retention;
    // degradation(t) = (retention(t+1, t) - retention(P, t)) / retention(t+1, t)
    std::vector<double> degradation;
};

inline RetentionReport forgetting_experiment(AdapterMethod method, const SequentialTaskSet& tasks,
                                             const LayerConfig& moe_template,
                                             const TrainConfig& config) {
    if (tasks.tasks.size() < 2)
        throw InvalidInput("forgetting_experiment: need at least two tasks");
    const Index n_tasks = static_cast<Index>(tasks.tasks.size());
    LayerConfig layer_config = method_layer_config(method, moe_template);
    SpectralMoeLayer layer = init_layer(tasks.w0, layer_config, config.seed);

    RetentionReport report;
    report.method = method;
    report.loss = Matrix::Zero(n_tasks + 1, n_tasks);
    auto eval_task = [&](const TeacherTask& task) {
        return detail::eval_mean_loss(
            task, [&](const Vector& x) { return forward(layer, x).y; }, config.eval_samples,
            config.seed);
    };
    for (Index t = 0; t < n_tasks; ++t) {
        report.task_names.push_back("task" + std::to_string(t));
        report.loss(0, t) = eval_task(tasks.tasks[static_cast<std::size_t>(t)]);
    }
    for (Index phase = 0; phase < n_tasks; ++phase) {
        TrainConfig phase_config = config;
        phase_config.seed = mix_seed(config.seed, 1000 + static_cast<std::uint64_t>(phase));
        train(layer, tasks.tasks[static_cast<std::size_t>(phase)], phase_config);
        for (Index t = 0; t < n_tasks; ++t)
            report.loss(phase + 1, t) = eval_task(tasks.tasks[static_cast<std::size_t>(t)]);
    }
    report.retention = Matrix::Zero(n_tasks + 1, n_tasks);
    for (Index p = 0; p <= n_tasks; ++p)
        for (Index t = 0; t < n_tasks; ++t)
            report.retention(p, t) = 1.0 - report.loss(p, t) / report.loss(0, t);
    for (Index t = 0; t < n_tasks; ++t) {
        const double own = report.retention(t + 1, t);
        const double final_r = report.retention(n_tasks, t);
        report.degradation.push_back(own > 0.0 ? (own - final_r) / own
                                               : std::numeric_limits<double>::quiet_NaN());
    }
    return report;
}

struct SweepCell {
    Index n_experts = 0;
    Index top_k = 0;
    bool completed = false;
    std::string skip_reason;
    double final_eval = std::numeric_limits<double>::quiet_NaN();
};

// One trained run per valid (N, k) cell at fixed total rank; invalid cells are
// skipped with the reason recorded.
inline std::vector<SweepCell> expert_sweep(const std::vector<Index>& n_experts_grid,
                                           const std::vector<Index>& top_k_grid,
                                           Index total_rank, const Matrix& w0,
                                           const TeacherTask& task,
                                           const LayerConfig& layer_template,
                                           const TrainConfig& config) {
    std::vector<SweepCell> cells;
    for (Index n_experts : n_experts_grid) {
        for (Index top_k : top_k_grid) {
            SweepCell cell;
            cell.n_experts = n_experts;
            cell.top_k = top_k;
            if (top_k > n_experts) {
                cell.skip_reason = "top_k exceeds n_experts";
                cells.push_back(cell);
                continue;
            }
            if (n_experts < 1 || total_rank % n_experts != 0) {
                cell.skip_reason = "total rank not divisible by n_experts";
                cells.push_back(cell);
                continue;
            }
            LayerConfig lc = layer_template;
            lc.total_rank = total_rank;
            lc.n_experts = n_experts;
            lc.top_k = top_k;
            try {
                SpectralMoeLayer layer =
                    init_layer(w0, lc, mix_seed(config.seed, static_cast<std::uint64_t>(
                                                                 cells.size())));
                TrainLog log = train(layer, task, config);
                cell.completed = true;
                cell.final_eval = log.final_eval;
            } catch (const InvalidInput& err) {
                cell.skip_reason = err.what();
            }
            cells.push_back(cell);
        }
    }
    return cells;
}

}  // namespace smoe

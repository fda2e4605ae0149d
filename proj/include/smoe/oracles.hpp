// oracles.hpp -- brute-force references the theorem checks compare against:
// full fine-tuning, upcycled full-rank MoE, and finite-difference gradients.
#pragma once

#include "smoe/core.hpp"
#include "smoe/moe_layer.hpp"
#include "smoe/routing.hpp"

#include <functional>
#include <vector>

namespace smoe {

enum class LossKind { SquaredError, SoftmaxCrossEntropy };

// Loss conventions: squared error is 1/2 ||y - t||^2 so gradients carry no
// factor of two; cross-entropy takes a target distribution vector.
inline double loss_value(LossKind kind, const Vector& y, const Vector& target) {
    switch (kind) {
        case LossKind::SquaredError:
            return 0.5 * (y - target).squaredNorm();
        case LossKind::SoftmaxCrossEntropy: {
            Vector logp = (y.array() - y.maxCoeff());
            const double lse = std::log(logp.array().exp().sum());
            return -(target.array() * (logp.array() - lse)).sum();
        }
    }
    throw InvalidInput("loss_value: unsupported loss");
}

inline Vector loss_grad_output(LossKind kind, const Vector& y, const Vector& target) {
    switch (kind) {
        case LossKind::SquaredError:
            return y - target;
        case LossKind::SoftmaxCrossEntropy:
            return softmax(y) - target;
    }
    throw InvalidInput("loss_grad_output: unsupported loss");
}

struct FullFtModel {
    Matrix w;  // trainable m x n

    Vector forward(const Vector& x) const {
        if (x.size() != w.cols()) throw InvalidInput("FullFtModel: input dimension mismatch");
        return w * x;
    }
};

inline Matrix full_ft_gradient(const FullFtModel& model, const Vector& x, const Vector& target,
                               LossKind loss_kind) {
    Vector y = model.forward(x);
    if (target.size() != y.size()) throw InvalidInput("full_ft_gradient: target size mismatch");
    return loss_grad_output(loss_kind, y, target) * x.transpose();
}

// Full-rank MoE whose experts all start as copies of the same pretrained
// weight; the reference the low-rank system is aligned to.
struct UpcycledMoeModel {
    std::vector<Matrix> experts;  // trainable, all W0 copies at init
    RouterState router;           // trainable
    GateConfig config;

    static UpcycledMoeModel upcycle(const Matrix& w0, const GateConfig& config,
                                    const Matrix& router_w) {
        config.validate();
        if (router_w.rows() != w0.cols() || router_w.cols() != config.n_experts)
            throw InvalidInput("UpcycledMoeModel: router shape mismatch");
        UpcycledMoeModel m;
        m.config = config;
        m.router.w = router_w;
        m.experts.assign(static_cast<std::size_t>(config.n_experts), w0);
        return m;
    }

    Vector forward(const Vector& x, GateOutput* gate_out = nullptr) const {
        GateOutput gate = topk_gate(router, x, config);
        Vector y = Vector::Zero(experts.front().rows());
        for (Index i : gate.selected) y += gate.weights(i) * (experts[static_cast<std::size_t>(i)] * x);
        if (gate_out) *gate_out = gate;
        return y;
    }
};

struct UpcycledBackward {
    Vector y;
    std::vector<Matrix> expert_grads;  // zero for unselected experts
    Matrix router_grad;
    GateOutput gate;
    double loss = 0.0;
};

inline UpcycledBackward upcycled_forward_backward(const UpcycledMoeModel& model, const Vector& x,
                                                  const Vector& target, LossKind loss_kind) {
    if (x.size() != model.router.w.rows())
        throw InvalidInput("upcycled_forward_backward: input dimension mismatch");
    UpcycledBackward out;
    out.y = model.forward(x, &out.gate);
    if (target.size() != out.y.size())
        throw InvalidInput("upcycled_forward_backward: target size mismatch");
    out.loss = loss_value(loss_kind, out.y, target);
    Vector g = loss_grad_output(loss_kind, out.y, target);

    out.expert_grads.reserve(model.experts.size());
    for (const Matrix& w : model.experts) out.expert_grads.push_back(Matrix::Zero(w.rows(), w.cols()));
    Vector c = Vector::Zero(model.config.n_experts);
    for (Index i : out.gate.selected) {
        out.expert_grads[static_cast<std::size_t>(i)] = out.gate.weights(i) * g * x.transpose();
        c(i) = g.dot(model.experts[static_cast<std::size_t>(i)] * x);
    }
    double weighted = 0.0;
    for (Index i : out.gate.selected) weighted += out.gate.weights(i) * c(i);
    Vector grad_z = Vector::Zero(model.config.n_experts);
    for (Index j : out.gate.selected) grad_z(j) = out.gate.weights(j) * (c(j) - weighted);
    out.router_grad = x * grad_z.transpose();
    return out;
}

// Central differences per entry: (f(theta + eps E) - f(theta - eps E)) / (2 eps).
inline Matrix finite_diff_gradient(const std::function<double(const Matrix&)>& f, Matrix theta,
                                   double step) {
    if (!(step > 0.0)) throw InvalidInput("finite_diff_gradient: step must be positive");
    Matrix grad(theta.rows(), theta.cols());
    for (Index j = 0; j < theta.cols(); ++j) {
        for (Index i = 0; i < theta.rows(); ++i) {
            const double saved = theta(i, j);
            theta(i, j) = saved + step;
            const double fp = f(theta);
            theta(i, j) = saved - step;
            const double fm = f(theta);
            theta(i, j) = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericalFailure("finite_diff_gradient: non-finite function value");
            grad(i, j) = (fp - fm) / (2.0 * step);
        }
    }
    return grad;
}

struct AlignmentTrace {
    // divergence(t)(i) = || (W0 + s b_i a_i) - W_i^FT || after step t+1
    std::vector<Vector> divergence;
    Vector final_divergence;
};

// Paired run of a zero-init LoRA MoE against an upcycled full-rank MoE on the
// same data stream, routers identical and frozen after init so the per-expert
// dynamics are isolated.
inline AlignmentTrace alignment_trace(SpectralMoeLayer lora, UpcycledMoeModel ft,
                                      const Matrix& w_star, Index steps, double lr_lora,
                                      double lr_ft, std::uint64_t data_seed) {
    if (lora.config.n_experts != ft.config.n_experts || lora.config.top_k != ft.config.top_k)
        throw InvalidInput("alignment_trace: gate configuration mismatch");
    if (lora.input_dim() != ft.router.w.rows())
        throw InvalidInput("alignment_trace: input dimension mismatch");
    if ((lora.router.w - ft.router.w).norm() != 0.0)
        throw InvalidInput("alignment_trace: routers must coincide at init");

    const Index n_experts = lora.config.n_experts;
    const Matrix w0 = lora.original_weight();
    Rng rng = make_rng(data_seed);
    AlignmentTrace trace;
    trace.divergence.reserve(static_cast<std::size_t>(steps));
    for (Index t = 0; t < steps; ++t) {
        Vector x = gaussian_vector(lora.input_dim(), rng);
        x /= x.norm();
        Vector target = w_star * x;

        UpcycledBackward ft_back = upcycled_forward_backward(ft, x, target, LossKind::SquaredError);
        for (Index i : ft_back.gate.selected)
            ft.experts[static_cast<std::size_t>(i)] -=
                lr_ft * ft_back.expert_grads[static_cast<std::size_t>(i)];

        ForwardResult f = forward(lora, x);
        LayerGradients grads = backward(lora, x, f.y - target, false);
        for (Index i : f.gate.selected) {
            ExpertAdapter& e = lora.experts[static_cast<std::size_t>(i)];
            e.b -= lr_lora * grads.grad_b[static_cast<std::size_t>(i)];
            e.a -= lr_lora * grads.grad_a[static_cast<std::size_t>(i)];
        }

        Vector div(n_experts);
        for (Index i = 0; i < n_experts; ++i) {
            const ExpertAdapter& e = lora.experts[static_cast<std::size_t>(i)];
            div(i) = (w0 + lora.expert_scale(i) * (e.b * e.a) - ft.experts[static_cast<std::size_t>(i)])
                         .norm();
        }
        trace.divergence.push_back(div);
    }
    trace.final_divergence =
        trace.divergence.empty() ? Vector::Zero(n_experts) : trace.divergence.back();
    return trace;
}

}  // namespace smoe

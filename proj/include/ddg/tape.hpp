#pragma once

// Reverse-mode recording on top of the explicit forward/backward primitives.
//
// A Var is a shared node holding a value and a lazily allocated gradient.
// Every tape-aware op computes its forward eagerly and, when a tape is
// supplied, pushes a closure that reads the output gradient and accumulates
// into its inputs' gradients. GradTape::backward replays closures in exact
// reverse order of recording.

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ddg/ops.hpp"
#include "ddg/tensor.hpp"

namespace ddg {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // empty until first accumulation
    bool requires_grad = false;

    explicit Node(Tensor<T> v, bool rg = false) : value(std::move(v)), requires_grad(rg) {}

    void accumulate(const Tensor<T>& g) {
        if (grad.shape() != value.shape()) {
            value.require_same_shape(g, "gradient accumulation");
            grad = g;
            return;
        }
        grad += g;
    }

    /// Gradient buffer, allocated as zeros if nothing flowed into it.
    Tensor<T>& grad_or_zeros() {
        if (grad.shape() != value.shape()) grad = Tensor<T>::zeros_like(value);
        return grad;
    }

    void zero_grad() { grad = Tensor<T>::zeros_like(value); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> constant(Tensor<T> v) {
    return std::make_shared<Node<T>>(std::move(v), false);
}

/// Leaf that receives gradients. Gradients accumulate across backward calls
/// until zero_grad() is called explicitly.
template <typename T>
Var<T> parameter(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>(std::move(v), true);
    n->zero_grad();
    return n;
}

template <typename T>
class GradTape {
public:
    void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return entries_.size(); }

    /// Seeds d(root)/d(root) = 1 (root must be a scalar) and replays.
    void backward(const Var<T>& root) {
        if (root->value.size() != 1) throw UsageError("GradTape::backward: root must be a scalar");
        root->grad = Tensor<T>::full(root->value.shape(), T(1));
        replay();
    }

    /// Replays with whatever gradients were seeded on outputs by the caller.
    void replay() {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
        entries_.clear();
    }

    void clear() { entries_.clear(); }

private:
    std::vector<std::function<void()>> entries_;
};

namespace ag {

// Only record if there is a tape and something upstream wants a gradient.
template <typename T, typename... V>
bool wants_grad(GradTape<T>* tape, const V&... vars) {
    return tape && (vars->requires_grad || ...);
}

template <typename T>
Var<T> make_output(Tensor<T> value, bool requires_grad) {
    return std::make_shared<Node<T>>(std::move(value), requires_grad);
}

template <typename T>
Var<T> conv2d(GradTape<T>* tape, const Var<T>& x, const Var<T>& k, std::size_t stride, std::size_t padding) {
    const bool rg = wants_grad(tape, x, k);
    auto out = make_output(conv2d_forward(x->value, k->value, stride, padding), rg);
    if (rg) {
        tape->record([x, k, out, stride, padding] {
            if (out->grad.empty()) return;
            auto g = conv2d_backward(out->grad, x->value, k->value, stride, padding);
            if (x->requires_grad) x->accumulate(g.input);
            if (k->requires_grad) k->accumulate(g.kernel);
        });
    }
    return out;
}

template <typename T>
Var<T> batchnorm2d(GradTape<T>* tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   BatchNormStats<T>& stats, Mode mode) {
    const bool rg = wants_grad(tape, x, gamma, beta);
    auto r = batchnorm2d_forward(x->value, gamma->value, beta->value, stats, mode);
    auto out = make_output(std::move(r.output), rg);
    if (rg) {
        tape->record([x, gamma, beta, out, saved = std::move(r.saved)] {
            if (out->grad.empty()) return;
            auto g = batchnorm2d_backward(out->grad, saved, gamma->value);
            if (x->requires_grad) x->accumulate(g.input);
            if (gamma->requires_grad) gamma->accumulate(g.gamma);
            if (beta->requires_grad) beta->accumulate(g.beta);
        });
    }
    return out;
}

template <typename T>
Var<T> relu(GradTape<T>* tape, const Var<T>& x) {
    const bool rg = wants_grad(tape, x);
    auto out = make_output(relu_forward(x->value), rg);
    if (rg) {
        tape->record([x, out] {
            if (out->grad.empty()) return;
            x->accumulate(relu_backward(out->grad, x->value));
        });
    }
    return out;
}

template <typename T>
Var<T> add(GradTape<T>* tape, const Var<T>& a, const Var<T>& b) {
    const bool rg = wants_grad(tape, a, b);
    Tensor<T> v = a->value;
    v += b->value;
    auto out = make_output(std::move(v), rg);
    if (rg) {
        tape->record([a, b, out] {
            if (out->grad.empty()) return;
            if (a->requires_grad) a->accumulate(out->grad);
            if (b->requires_grad) b->accumulate(out->grad);
        });
    }
    return out;
}

template <typename T>
Var<T> global_avg_pool(GradTape<T>* tape, const Var<T>& x) {
    const bool rg = wants_grad(tape, x);
    auto out = make_output(ddg::global_avg_pool(x->value), rg);
    if (rg) {
        tape->record([x, out] {
            if (out->grad.empty()) return;
            x->accumulate(global_avg_pool_backward(out->grad, x->value.shape()));
        });
    }
    return out;
}

template <typename T>
Var<T> dense(GradTape<T>* tape, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const bool rg = wants_grad(tape, x, w, b);
    auto out = make_output(dense_forward(x->value, w->value, b->value), rg);
    if (rg) {
        tape->record([x, w, b, out] {
            if (out->grad.empty()) return;
            auto g = dense_backward(out->grad, x->value, w->value);
            if (x->requires_grad) x->accumulate(g.input);
            if (w->requires_grad) w->accumulate(g.weight);
            if (b->requires_grad) b->accumulate(g.bias);
        });
    }
    return out;
}

/// Scalar mean soft-label cross-entropy.
template <typename T>
Var<T> cross_entropy(GradTape<T>* tape, const Var<T>& logits, const Tensor<T>& labels) {
    const bool rg = wants_grad(tape, logits);
    auto r = cross_entropy_with_soft_labels(logits->value, labels);
    auto out = make_output(Tensor<T>({1}, std::vector<T>{r.loss}), rg);
    if (rg) {
        tape->record([logits, out, g = std::move(r.grad_logits)]() mutable {
            if (out->grad.empty()) return;
            g *= out->grad[0];
            logits->accumulate(g);
        });
    }
    return out;
}

} // namespace ag
} // namespace ddg

#pragma once

// Instance-conditioned convolution.
//
// For every sample b the layer convolves with
//
//     K_b = static_kernel + sum_n coeff[b,n] * embed(V_n)
//
// where coeff[b,:] = softmax(W2^T relu(W1^T GAP(f_b) + b1) + b2) comes from
// the meta-adjuster applied to a feature map f (by default the conv input),
// and embed() places each kernel template into full [Cout,Cin,k,k] shape.
//
// Template layouts:
//   asymmetric     V1 [Cin,1,k,k]   depthwise, broadcast over Cout
//                  V2 [Cout,Cin,1,1] spatial center
//                  V3 [Cout,Cin,k,1] center column
//                  V4 [Cout,Cin,1,k] center row
//   identical_1x1  four [Cout,Cin,1,1], each at the spatial center
//   identical_kxk  four [Cout,Cin,k,k], used as-is
// Only V1 (and kxk templates) can touch the kernel corners.

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ddg/ops.hpp"
#include "ddg/rng.hpp"
#include "ddg/tape.hpp"
#include "ddg/tensor.hpp"

namespace ddg {

inline constexpr std::size_t kNumTemplates = 4;

enum class TemplateLayout { asymmetric, identical_1x1, identical_kxk };

inline std::string to_string(TemplateLayout l) {
    switch (l) {
    case TemplateLayout::asymmetric: return "asymmetric";
    case TemplateLayout::identical_1x1: return "identical_1x1";
    case TemplateLayout::identical_kxk: return "identical_3x3";
    }
    return "?";
}

/// Shape of template n for a layer with the given channel counts and kernel size.
inline Shape template_shape(TemplateLayout layout, std::size_t n, std::size_t cout, std::size_t cin, std::size_t k) {
    switch (layout) {
    case TemplateLayout::asymmetric:
        switch (n) {
        case 0: return {cin, 1, k, k};
        case 1: return {cout, cin, 1, 1};
        case 2: return {cout, cin, k, 1};
        case 3: return {cout, cin, 1, k};
        }
        break;
    case TemplateLayout::identical_1x1: return {cout, cin, 1, 1};
    case TemplateLayout::identical_kxk: return {cout, cin, k, k};
    }
    throw UsageError("template_shape: template index out of range");
}

template <typename T>
struct KernelTemplateSet {
    TemplateLayout layout = TemplateLayout::asymmetric;
    std::size_t out_channels = 0, in_channels = 0, kernel_size = 0;
    std::array<Var<T>, kNumTemplates> v;

    static KernelTemplateSet zeros(TemplateLayout layout, std::size_t cout, std::size_t cin, std::size_t k) {
        KernelTemplateSet s{layout, cout, cin, k, {}};
        s.validate_geometry();
        for (std::size_t n = 0; n < kNumTemplates; ++n) s.v[n] = parameter(Tensor<T>(template_shape(layout, n, cout, cin, k)));
        return s;
    }

    static KernelTemplateSet from_tensors(TemplateLayout layout, std::size_t cout, std::size_t cin, std::size_t k,
                                          std::array<Tensor<T>, kNumTemplates> tensors) {
        KernelTemplateSet s{layout, cout, cin, k, {}};
        s.validate_geometry();
        for (std::size_t n = 0; n < kNumTemplates; ++n) s.v[n] = parameter(std::move(tensors[n]));
        s.validate();
        return s;
    }

    void validate_geometry() const {
        if (kernel_size % 2 == 0)
            throw ConfigError("kernel templates need an odd kernel size for a unique center, got " +
                              std::to_string(kernel_size));
    }

    void validate() const {
        validate_geometry();
        for (std::size_t n = 0; n < kNumTemplates; ++n) {
            if (!v[n]) throw ConfigError("kernel template " + std::to_string(n + 1) + " missing");
            const Shape want = template_shape(layout, n, out_channels, in_channels, kernel_size);
            if (v[n]->value.shape() != want)
                throw DimensionError("kernel template " + std::to_string(n + 1) + " has shape " +
                                     shape_str(v[n]->value.shape()) + ", expected " + shape_str(want));
        }
    }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        for (std::size_t n = 0; n < kNumTemplates; ++n)
            total += shape_numel(template_shape(layout, n, out_channels, in_channels, kernel_size));
        return total;
    }
};

/// Places template n into full kernel shape [Cout,Cin,k,k].
template <typename T>
Tensor<T> embed_template(const Tensor<T>& tmpl, TemplateLayout layout, std::size_t n, std::size_t cout,
                         std::size_t cin, std::size_t k) {
    const Shape want = template_shape(layout, n, cout, cin, k);
    if (tmpl.shape() != want)
        throw DimensionError("embed_template: template " + std::to_string(n + 1) + " shape " + shape_str(tmpl.shape()) +
                             " != " + shape_str(want));
    if (k % 2 == 0) throw ConfigError("embed_template: even kernel size " + std::to_string(k));
    Tensor<T> full({cout, cin, k, k});
    const std::size_t c = (k - 1) / 2;
    const std::size_t th = want[2], tw = want[3];
    // A template of spatial size th x tw lands centered in the k x k window.
    const std::size_t oi = c - (th - 1) / 2, oj = c - (tw - 1) / 2;
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t i = 0; i < cin; ++i)
            for (std::size_t a = 0; a < th; ++a)
                for (std::size_t b = 0; b < tw; ++b) {
                    const bool depthwise = layout == TemplateLayout::asymmetric && n == 0;
                    full.at(o, i, oi + a, oj + b) = depthwise ? tmpl.at(i, 0, a, b) : tmpl.at(o, i, a, b);
                }
    return full;
}

/// Adjoint of embed_template: maps a full-kernel gradient back to template shape.
template <typename T>
Tensor<T> embed_template_adjoint(const Tensor<T>& grad_full, TemplateLayout layout, std::size_t n, std::size_t cout,
                                 std::size_t cin, std::size_t k) {
    const Shape want = template_shape(layout, n, cout, cin, k);
    Tensor<T> g(want);
    const std::size_t c = (k - 1) / 2;
    const std::size_t th = want[2], tw = want[3];
    const std::size_t oi = c - (th - 1) / 2, oj = c - (tw - 1) / 2;
    const bool depthwise = layout == TemplateLayout::asymmetric && n == 0;
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t i = 0; i < cin; ++i)
            for (std::size_t a = 0; a < th; ++a)
                for (std::size_t b = 0; b < tw; ++b) {
                    const T v = grad_full.at(o, i, oi + a, oj + b);
                    if (depthwise)
                        g.at(i, 0, a, b) += v;
                    else
                        g.at(o, i, a, b) += v;
                }
    return g;
}

template <typename T>
std::array<Tensor<T>, kNumTemplates> embed_templates(const KernelTemplateSet<T>& set) {
    set.validate();
    std::array<Tensor<T>, kNumTemplates> out;
    for (std::size_t n = 0; n < kNumTemplates; ++n)
        out[n] = embed_template(set.v[n]->value, set.layout, n, set.out_channels, set.in_channels, set.kernel_size);
    return out;
}

/// dTheta = sum_n coeffs[n] * embedded[n].
template <typename T>
Tensor<T> assemble_dynamic_kernel(std::span<const T> coeffs, const std::array<Tensor<T>, kNumTemplates>& embedded) {
    if (coeffs.size() != kNumTemplates)
        throw DimensionError("assemble_dynamic_kernel: expected " + std::to_string(kNumTemplates) +
                             " coefficients, got " + std::to_string(coeffs.size()));
    for (T c : coeffs)
        if (!std::isfinite(c)) throw NumericError("assemble_dynamic_kernel: non-finite coefficient");
    Tensor<T> delta = Tensor<T>::zeros_like(embedded[0]);
    for (std::size_t n = 0; n < kNumTemplates; ++n) delta.axpy(coeffs[n], embedded[n]);
    return delta;
}

template <typename T>
Tensor<T> assemble_dynamic_kernel(std::span<const T> coeffs, const KernelTemplateSet<T>& set) {
    return assemble_dynamic_kernel(coeffs, embed_templates(set));
}

// ---------------------------------------------------------------------------
// Meta-adjuster: GAP -> FC -> ReLU -> FC -> SoftMax
// ---------------------------------------------------------------------------

template <typename T>
struct MetaAdjuster {
    Var<T> w1, b1, w2, b2; // [A,H], [H], [H,N], [N]

    std::size_t in_channels() const { return w1->value.dim(0); }
    std::size_t hidden() const { return w1->value.dim(1); }
    std::size_t num_coeffs() const { return w2->value.dim(1); }

    static std::size_t hidden_for(std::size_t in_channels, std::size_t reduction) {
        if (reduction == 0) throw ConfigError("meta-adjuster reduction ratio must be positive");
        return std::max<std::size_t>(1, in_channels / reduction);
    }

    /// Fan-in uniform weights, zero biases.
    static MetaAdjuster init(std::size_t in_channels, std::size_t reduction, Rng& rng) {
        const std::size_t h = hidden_for(in_channels, reduction);
        const double a1 = 1.0 / std::sqrt(static_cast<double>(in_channels));
        const double a2 = 1.0 / std::sqrt(static_cast<double>(h));
        return {parameter(random_uniform<T>({in_channels, h}, rng, -a1, a1)), parameter(Tensor<T>({h})),
                parameter(random_uniform<T>({h, kNumTemplates}, rng, -a2, a2)), parameter(Tensor<T>({kNumTemplates}))};
    }

    static std::size_t parameter_count(std::size_t in_channels, std::size_t reduction) {
        const std::size_t h = hidden_for(in_channels, reduction);
        return in_channels * h + h + h * kNumTemplates + kNumTemplates;
    }

    std::size_t parameter_count() const {
        return w1->value.size() + b1->value.size() + w2->value.size() + b2->value.size();
    }

    void validate() const {
        require_rank(w1->value, 2, "meta-adjuster W1");
        require_rank(w2->value, 2, "meta-adjuster W2");
        if (b1->value.shape() != Shape{hidden()} || w2->value.dim(0) != hidden() ||
            b2->value.shape() != Shape{num_coeffs()})
            throw DimensionError("meta-adjuster parameters do not chain");
        if (num_coeffs() != kNumTemplates)
            throw DimensionError("meta-adjuster must emit " + std::to_string(kNumTemplates) + " coefficients");
    }
};

template <typename T>
struct AdjusterSaved {
    Shape input_shape;
    Tensor<T> pooled, hidden_pre, hidden, coeffs;
};

template <typename T>
AdjusterSaved<T> adjuster_forward(const Tensor<T>& feature, const MetaAdjuster<T>& adj) {
    require_rank(feature, 4, "adjuster input");
    adj.validate();
    if (feature.dim(1) != adj.in_channels())
        throw DimensionError("adjuster: feature channel axis 1 (" + std::to_string(feature.dim(1)) +
                             ") != W1 axis 0 (" + std::to_string(adj.in_channels()) + ")");
    AdjusterSaved<T> s;
    s.input_shape = feature.shape();
    s.pooled = global_avg_pool(feature);
    s.hidden_pre = dense_forward(s.pooled, adj.w1->value, adj.b1->value);
    s.hidden = relu_forward(s.hidden_pre);
    s.coeffs = softmax_forward(dense_forward(s.hidden, adj.w2->value, adj.b2->value));
    return s;
}

/// Per-instance coefficients [B, 4]; every row lies on the simplex.
template <typename T>
Tensor<T> adjuster_coefficients(const Tensor<T>& feature, const MetaAdjuster<T>& adj) {
    return adjuster_forward(feature, adj).coeffs;
}

template <typename T>
struct AdjusterGrads {
    Tensor<T> input, w1, b1, w2, b2;
};

template <typename T>
AdjusterGrads<T> adjuster_backward(const Tensor<T>& grad_coeffs, const AdjusterSaved<T>& s,
                                   const MetaAdjuster<T>& adj) {
    const Tensor<T> g_logits = softmax_backward(grad_coeffs, s.coeffs);
    auto g2 = dense_backward(g_logits, s.hidden, adj.w2->value);
    const Tensor<T> g_pre = relu_backward(g2.input, s.hidden_pre);
    auto g1 = dense_backward(g_pre, s.pooled, adj.w1->value);
    return {global_avg_pool_backward(g1.input, s.input_shape), std::move(g1.weight), std::move(g1.bias),
            std::move(g2.weight), std::move(g2.bias)};
}

// ---------------------------------------------------------------------------
// Dynamic convolution layer
// ---------------------------------------------------------------------------

template <typename T>
struct DynamicConvLayer {
    Var<T> static_kernel; // [Cout,Cin,k,k]
    KernelTemplateSet<T> templates;
    MetaAdjuster<T> adjuster;
    std::size_t stride = 1, padding = 0;

    std::size_t out_channels() const { return static_kernel->value.dim(0); }
    std::size_t in_channels() const { return static_kernel->value.dim(1); }
    std::size_t kernel_size() const { return static_kernel->value.dim(2); }

    void validate() const {
        require_rank(static_kernel->value, 4, "dynamic conv static kernel");
        templates.validate();
        adjuster.validate();
        const Shape& s = static_kernel->value.shape();
        if (s[0] != templates.out_channels || s[1] != templates.in_channels || s[2] != templates.kernel_size ||
            s[3] != templates.kernel_size)
            throw DimensionError("dynamic conv: static kernel " + shape_str(s) + " does not match template geometry");
    }

    std::size_t parameter_count() const {
        return static_kernel->value.size() + templates.parameter_count() + adjuster.parameter_count();
    }

    /// Exact count: Cout*Cin*k^2 + template sizes + adjuster sizes.
    static std::size_t parameter_count(TemplateLayout layout, std::size_t cout, std::size_t cin, std::size_t k,
                                       std::size_t adjuster_in, std::size_t reduction) {
        std::size_t t = 0;
        for (std::size_t n = 0; n < kNumTemplates; ++n) t += shape_numel(template_shape(layout, n, cout, cin, k));
        return cout * cin * k * k + t + MetaAdjuster<T>::parameter_count(adjuster_in, reduction);
    }
};

template <typename T>
struct DynamicConvSaved {
    bool valid = false;
    Tensor<T> input;
    AdjusterSaved<T> adjuster;
    std::array<Tensor<T>, kNumTemplates> embedded;
    Tensor<T> kernels; // [B*Cout, Cin, k, k]
};

template <typename T>
struct DynamicConvResult {
    Tensor<T> output;
    Tensor<T> coeffs; // [B, 4]
    DynamicConvSaved<T> saved;
};

/// Stacks the B per-instance kernels Theta_s + dTheta(x_b) into [B*Cout,Cin,k,k].
template <typename T>
Tensor<T> per_instance_kernels(const Tensor<T>& static_kernel, const Tensor<T>& coeffs,
                               const std::array<Tensor<T>, kNumTemplates>& embedded) {
    const std::size_t B = coeffs.dim(0), per = static_kernel.size();
    const Shape& s = static_kernel.shape();
    Tensor<T> kernels({B * s[0], s[1], s[2], s[3]});
    for (std::size_t b = 0; b < B; ++b) {
        const Tensor<T> delta =
            assemble_dynamic_kernel(std::span<const T>(coeffs.data() + b * kNumTemplates, kNumTemplates), embedded);
        T* dst = kernels.data() + b * per;
        for (std::size_t i = 0; i < per; ++i) dst[i] = static_kernel[i] + delta[i];
    }
    return kernels;
}

/// Production path: the batch is run as one grouped convolution with
/// groups = B, each group carrying its own instance kernel.
template <typename T>
DynamicConvResult<T> dynamic_conv_forward(const Tensor<T>& input, const Tensor<T>& adjuster_input,
                                          const DynamicConvLayer<T>& layer) {
    layer.validate();
    require_rank(input, 4, "dynamic_conv input");
    if (input.dim(1) != layer.in_channels())
        throw DimensionError("dynamic_conv: input channel axis 1 (" + std::to_string(input.dim(1)) +
                             ") != kernel axis 1 (" + std::to_string(layer.in_channels()) + ")");
    if (adjuster_input.rank() != 4 || adjuster_input.dim(0) != input.dim(0))
        throw DimensionError("dynamic_conv: adjuster input batch axis 0 does not match input");
    DynamicConvResult<T> r;
    r.saved.adjuster = adjuster_forward(adjuster_input, layer.adjuster);
    r.coeffs = r.saved.adjuster.coeffs;
    r.saved.embedded = embed_templates(layer.templates);
    r.saved.kernels = per_instance_kernels(layer.static_kernel->value, r.coeffs, r.saved.embedded);
    const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const Tensor<T> grouped_in = input.reshaped({1, B * C, H, W});
    const Tensor<T> grouped_out = conv2d_forward(grouped_in, r.saved.kernels, layer.stride, layer.padding, B);
    r.output = grouped_out.reshaped({B, layer.out_channels(), grouped_out.dim(2), grouped_out.dim(3)});
    r.saved.input = input;
    r.saved.valid = true;
    return r;
}

template <typename T>
DynamicConvResult<T> dynamic_conv_forward(const Tensor<T>& input, const DynamicConvLayer<T>& layer) {
    return dynamic_conv_forward(input, input, layer);
}

/// Alternative route by linearity of convolution in the kernel:
///   conv(x, Theta_s) + sum_n coeff[b,n] * conv(x_b, embed(V_n)).
/// The asymmetric V1 branch runs as a depthwise convolution summed over
/// input channels, which equals convolving with its Cout-broadcast embedding.
template <typename T>
Tensor<T> dynamic_conv_forward_branches(const Tensor<T>& input, const Tensor<T>& adjuster_input,
                                        const DynamicConvLayer<T>& layer) {
    layer.validate();
    const Tensor<T> coeffs = adjuster_coefficients(adjuster_input, layer.adjuster);
    Tensor<T> out = conv2d_forward(input, layer.static_kernel->value, layer.stride, layer.padding);
    const std::size_t B = out.dim(0), Cout = out.dim(1), HW = out.dim(2) * out.dim(3);
    const auto& ts = layer.templates;
    for (std::size_t n = 0; n < kNumTemplates; ++n) {
        Tensor<T> branch;
        if (ts.layout == TemplateLayout::asymmetric && n == 0) {
            const Tensor<T> dw = depthwise_conv2d_forward(input, ts.v[0]->value, layer.stride, layer.padding);
            branch = Tensor<T>(out.shape());
            const std::size_t Cin = dw.dim(1);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < Cin; ++i) {
                    const T* src = dw.data() + (b * Cin + i) * HW;
                    for (std::size_t o = 0; o < Cout; ++o) {
                        T* dst = branch.data() + (b * Cout + o) * HW;
                        for (std::size_t p = 0; p < HW; ++p) dst[p] += src[p];
                    }
                }
        } else {
            const Tensor<T> e =
                embed_template(ts.v[n]->value, ts.layout, n, ts.out_channels, ts.in_channels, ts.kernel_size);
            branch = conv2d_forward(input, e, layer.stride, layer.padding);
        }
        for (std::size_t b = 0; b < B; ++b) {
            const T c = coeffs.at(b, n);
            T* dst = out.data() + b * Cout * HW;
            const T* src = branch.data() + b * Cout * HW;
            for (std::size_t p = 0; p < Cout * HW; ++p) dst[p] += c * src[p];
        }
    }
    return out;
}

template <typename T>
struct DynamicConvGrads {
    Tensor<T> input;          // through the convolution
    Tensor<T> adjuster_input; // through the coefficients
    Tensor<T> static_kernel;
    std::array<Tensor<T>, kNumTemplates> templates;
    AdjusterGrads<T> adjuster; // .input duplicates adjuster_input
    Tensor<T> coeffs;          // d loss / d coeff, [B,4]
};

/// Exact gradients, including the path through the coefficients into the
/// meta-adjuster. When the adjuster input is the conv input, the caller adds
/// `input` and `adjuster_input`.
template <typename T>
DynamicConvGrads<T> dynamic_conv_backward(const Tensor<T>& grad_out, const DynamicConvSaved<T>& saved,
                                          const DynamicConvLayer<T>& layer) {
    if (!saved.valid) throw UsageError("dynamic_conv_backward: no saved forward state");
    const Tensor<T>& x = saved.input;
    const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = layer.out_channels();
    if (grad_out.rank() != 4 || grad_out.dim(0) != B || grad_out.dim(1) != Cout)
        throw DimensionError("dynamic_conv_backward: grad_out " + shape_str(grad_out.shape()) +
                             " does not match the forward output");
    const Tensor<T> g_grouped = grad_out.reshaped({1, B * Cout, grad_out.dim(2), grad_out.dim(3)});
    auto cg = conv2d_backward(g_grouped, x.reshaped({1, B * Cin, H, W}), saved.kernels, layer.stride, layer.padding, B);

    DynamicConvGrads<T> g;
    g.input = cg.input.reshaped(x.shape());
    const Tensor<T>& gk = cg.kernel; // per-instance kernel gradients
    const std::size_t per = layer.static_kernel->value.size();
    g.static_kernel = Tensor<T>::zeros_like(layer.static_kernel->value);
    g.coeffs = Tensor<T>({B, kNumTemplates});
    std::array<Tensor<T>, kNumTemplates> g_embedded;
    for (auto& e : g_embedded) e = Tensor<T>::zeros_like(layer.static_kernel->value);
    for (std::size_t b = 0; b < B; ++b) {
        const T* gkb = gk.data() + b * per;
        for (std::size_t i = 0; i < per; ++i) g.static_kernel[i] += gkb[i];
        for (std::size_t n = 0; n < kNumTemplates; ++n) {
            const T c = saved.adjuster.coeffs.at(b, n);
            const T* e = saved.embedded[n].data();
            T dot = 0;
            T* ge = g_embedded[n].data();
            for (std::size_t i = 0; i < per; ++i) {
                dot += gkb[i] * e[i];
                ge[i] += c * gkb[i];
            }
            g.coeffs.at(b, n) = dot;
        }
    }
    const auto& ts = layer.templates;
    for (std::size_t n = 0; n < kNumTemplates; ++n)
        g.templates[n] = embed_template_adjoint(g_embedded[n], ts.layout, n, ts.out_channels, ts.in_channels,
                                                ts.kernel_size);
    g.adjuster = adjuster_backward(g.coeffs, saved.adjuster, layer.adjuster);
    g.adjuster_input = g.adjuster.input;
    return g;
}

namespace ag {

/// Tape-aware dynamic convolution. `coeffs_out`, when given, receives the
/// per-instance coefficients.
template <typename T>
Var<T> dynamic_conv(GradTape<T>* tape, const Var<T>& x, const Var<T>& adjuster_input, const DynamicConvLayer<T>& layer,
                    Tensor<T>* coeffs_out = nullptr) {
    const auto& L = layer;
    const bool rg = tape && (x->requires_grad || adjuster_input->requires_grad || L.static_kernel->requires_grad ||
                             L.adjuster.w1->requires_grad);
    auto r = dynamic_conv_forward(x->value, adjuster_input->value, layer);
    if (coeffs_out) *coeffs_out = r.coeffs;
    auto out = make_output(std::move(r.output), rg);
    if (rg) {
        tape->record([x, adjuster_input, out, layer, saved = std::move(r.saved)] {
            if (out->grad.empty()) return;
            auto g = dynamic_conv_backward(out->grad, saved, layer);
            if (x->requires_grad) x->accumulate(g.input);
            if (adjuster_input->requires_grad) adjuster_input->accumulate(g.adjuster_input);
            if (layer.static_kernel->requires_grad) layer.static_kernel->accumulate(g.static_kernel);
            for (std::size_t n = 0; n < kNumTemplates; ++n)
                if (layer.templates.v[n]->requires_grad) layer.templates.v[n]->accumulate(g.templates[n]);
            const auto& a = layer.adjuster;
            if (a.w1->requires_grad) a.w1->accumulate(g.adjuster.w1);
            if (a.b1->requires_grad) a.b1->accumulate(g.adjuster.b1);
            if (a.w2->requires_grad) a.w2->accumulate(g.adjuster.w2);
            if (a.b2->requires_grad) a.b2->accumulate(g.adjuster.b2);
        });
    }
    return out;
}

} // namespace ag
} // namespace ddg

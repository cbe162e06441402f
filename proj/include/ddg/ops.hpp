#pragma once

// Differentiable primitives with explicit forward/backward pairs.
//
// Layouts: activations are NCHW, conv kernels are [Cout, Cin/groups, kh, kw],
// dense weights are [in, out]. Every forward checks its output for NaN/Inf.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ddg/error.hpp"
#include "ddg/tensor.hpp"

namespace ddg {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeometry {
    std::size_t batch = 0, in_channels = 0, height = 0, width = 0;
    std::size_t out_channels = 0, kernel_h = 0, kernel_w = 0;
    std::size_t stride = 1, padding = 0, groups = 1;
    std::size_t out_h = 0, out_w = 0;

    std::size_t group_in() const { return in_channels / groups; }
    std::size_t group_out() const { return out_channels / groups; }
    std::size_t patch() const { return group_in() * kernel_h * kernel_w; }
    std::size_t out_pixels() const { return out_h * out_w; }
    bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && padding == 0; }
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t padding,
                                  std::size_t groups = 1) {
    if (input.size() != 4) throw DimensionError("conv2d: input must be [B,C,H,W], got " + shape_str(input));
    if (kernel.size() != 4) throw DimensionError("conv2d: kernel must be [Cout,Cin,kh,kw], got " + shape_str(kernel));
    if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
    if (groups < 1) throw DimensionError("conv2d: groups must be >= 1");
    ConvGeometry g;
    g.batch = input[0];
    g.in_channels = input[1];
    g.height = input[2];
    g.width = input[3];
    g.out_channels = kernel[0];
    g.kernel_h = kernel[2];
    g.kernel_w = kernel[3];
    g.stride = stride;
    g.padding = padding;
    g.groups = groups;
    if (g.in_channels % groups != 0 || g.out_channels % groups != 0)
        throw DimensionError("conv2d: channel axes (input axis 1 = " + std::to_string(g.in_channels) +
                             ", kernel axis 0 = " + std::to_string(g.out_channels) + ") not divisible by groups " +
                             std::to_string(groups));
    if (kernel[1] * groups != g.in_channels)
        throw DimensionError("conv2d: kernel axis 1 (" + std::to_string(kernel[1]) + ") x groups != input axis 1 (" +
                             std::to_string(g.in_channels) + ")");
    if (g.kernel_h == 0 || g.kernel_w == 0) throw DimensionError("conv2d: empty kernel spatial axes 2/3");
    if (g.kernel_h > g.height + 2 * padding || g.kernel_w > g.width + 2 * padding)
        throw DimensionError("conv2d: kernel spatial axes 2/3 " + shape_str(kernel) + " exceed padded input axes 2/3 " +
                             shape_str(input));
    g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
    g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;
    return g;
}

namespace detail {

// Gathers the receptive fields of one [cin, H, W] image into a
// [cin*kh*kw, out_h*out_w] matrix.
// Output columns [lo, hi) whose input column for kernel offset kj is in range.
inline std::pair<std::size_t, std::size_t> valid_cols(const ConvGeometry& g, std::size_t kj) {
    const long pad = static_cast<long>(g.padding), k = static_cast<long>(kj), s = static_cast<long>(g.stride);
    const long lo = std::max<long>(0, (pad - k + s - 1) / s);
    // last ow with ow*s + k - pad <= W - 1
    const long top = static_cast<long>(g.width) - 1 + pad - k;
    const long hi = top < 0 ? 0 : std::min<long>(static_cast<long>(g.out_w), top / s + 1);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

template <typename T>
void im2col(const T* x, std::size_t channels, const ConvGeometry& g, T* cols) {
    const std::size_t hw = g.out_pixels();
    for (std::size_t c = 0; c < channels; ++c) {
        const T* xc = x + c * g.height * g.width;
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                T* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * hw;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
                    T* dst = row + oh * g.out_w;
                    if (ih < 0 || ih >= static_cast<long>(g.height)) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* src = xc + static_cast<std::size_t>(ih) * g.width;
                    const auto [lo, hi] = valid_cols(g, kj);
                    std::fill(dst, dst + lo, T(0));
                    std::fill(dst + hi, dst + g.out_w, T(0));
                    const T* s0 = src + (lo * g.stride + kj - g.padding);
                    if (g.stride == 1)
                        std::copy(s0, s0 + (hi - lo), dst + lo);
                    else
                        for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = s0[(ow - lo) * g.stride];
                }
            }
        }
    }
}

// Scatter-adds a column matrix back into a [cin, H, W] image.
template <typename T>
void col2im_add(const T* cols, std::size_t channels, const ConvGeometry& g, T* x) {
    const std::size_t hw = g.out_pixels();
    for (std::size_t c = 0; c < channels; ++c) {
        T* xc = x + c * g.height * g.width;
        for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const T* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * hw;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
                    if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
                    T* dst = xc + static_cast<std::size_t>(ih) * g.width;
                    const T* src = row + oh * g.out_w;
                    const auto [lo, hi] = valid_cols(g, kj);
                    T* d0 = dst + (lo * g.stride + kj - g.padding);
                    for (std::size_t ow = lo; ow < hi; ++ow) d0[(ow - lo) * g.stride] += src[ow];
                }
            }
        }
    }
}

// Pairwise-free reductions with 8 independent lanes so the loops vectorize
// under strict IEEE semantics. Order is fixed, so results are deterministic.
template <typename T>
double lane_sum(const T* p, std::size_t n) {
    double lanes[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t j = 0; j < 8; ++j) lanes[j] += double(p[i + j]);
    double s = 0;
    for (; i < n; ++i) s += p[i];
    for (double l : lanes) s += l;
    return s;
}

template <typename T>
double lane_sq_dev(const T* p, std::size_t n, double mean) {
    double lanes[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t j = 0; j < 8; ++j) {
            const double d = double(p[i + j]) - mean;
            lanes[j] += d * d;
        }
    double s = 0;
    for (; i < n; ++i) s += (double(p[i]) - mean) * (double(p[i]) - mean);
    for (double l : lanes) s += l;
    return s;
}

} // namespace detail

/// Reusable im2col buffer plus the single-image convolution kernels that
/// both the static and the per-instance (dynamic) convolutions go through.
/// Sharing this path is what makes a dynamic layer with a zero dynamic term
/// bitwise-identical to its static counterpart.
template <typename T>
class ConvWorkspace {
public:
    // out[group_out, out_pixels] = kernel[group_out, patch] * cols(x)
    void forward_group(const T* x, const T* kernel, T* out, const ConvGeometry& g) {
        const T* cols = gather(x, g);
        Eigen::Map<const RowMatrix<T>> K(kernel, g.group_out(), g.patch());
        Eigen::Map<const RowMatrix<T>> C(cols, g.patch(), g.out_pixels());
        Eigen::Map<RowMatrix<T>> O(out, g.group_out(), g.out_pixels());
        O.noalias() = K * C;
    }

    // Accumulates into grad_kernel (if non-null) and grad_x (if non-null).
    void backward_group(const T* grad_out, const T* x, const T* kernel, T* grad_x, T* grad_kernel,
                        const ConvGeometry& g) {
        Eigen::Map<const RowMatrix<T>> G(grad_out, g.group_out(), g.out_pixels());
        if (grad_kernel) {
            const T* cols = gather(x, g);
            Eigen::Map<const RowMatrix<T>> C(cols, g.patch(), g.out_pixels());
            Eigen::Map<RowMatrix<T>> GK(grad_kernel, g.group_out(), g.patch());
            GK.noalias() += G * C.transpose();
        }
        if (grad_x) {
            Eigen::Map<const RowMatrix<T>> K(kernel, g.group_out(), g.patch());
            if (g.pointwise()) {
                Eigen::Map<RowMatrix<T>> GX(grad_x, g.group_in(), g.out_pixels());
                GX.noalias() += K.transpose() * G;
            } else {
                gcols_.resize(g.patch() * g.out_pixels());
                Eigen::Map<RowMatrix<T>> GC(gcols_.data(), g.patch(), g.out_pixels());
                GC.noalias() = K.transpose() * G;
                detail::col2im_add(gcols_.data(), g.group_in(), g, grad_x);
            }
        }
    }

private:
    const T* gather(const T* x, const ConvGeometry& g) {
        if (g.pointwise()) return x;
        cols_.resize(g.patch() * g.out_pixels());
        detail::im2col(x, g.group_in(), g, cols_.data());
        return cols_.data();
    }

    std::vector<T> cols_;
    std::vector<T> gcols_;
};

/// Cross-correlation, optionally grouped. Output [B, Cout, H', W'] with
/// H' = (H + 2*padding - kh) / stride + 1.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t padding,
                         std::size_t groups = 1) {
    const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding, groups);
    Tensor<T> out({g.batch, g.out_channels, g.out_h, g.out_w});
    ConvWorkspace<T> ws;
    const std::size_t in_img = g.in_channels * g.height * g.width;
    const std::size_t out_img = g.out_channels * g.out_pixels();
    const std::size_t in_grp = g.group_in() * g.height * g.width;
    const std::size_t out_grp = g.group_out() * g.out_pixels();
    const std::size_t k_grp = g.group_out() * g.patch();
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t gr = 0; gr < g.groups; ++gr)
            ws.forward_group(input.data() + b * in_img + gr * in_grp, kernel.data() + gr * k_grp,
                             out.data() + b * out_img + gr * out_grp, g);
    check_finite(out, "conv2d_forward");
    return out;
}

template <typename T>
struct Conv2dGrads {
    Tensor<T> input;
    Tensor<T> kernel;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& kernel,
                               std::size_t stride, std::size_t padding, std::size_t groups = 1) {
    const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding, groups);
    const Shape expect{g.batch, g.out_channels, g.out_h, g.out_w};
    if (grad_out.shape() != expect)
        throw DimensionError("conv2d_backward: grad_out " + shape_str(grad_out.shape()) + " != forward output " +
                             shape_str(expect));
    Conv2dGrads<T> grads{Tensor<T>::zeros_like(input), Tensor<T>::zeros_like(kernel)};
    ConvWorkspace<T> ws;
    const std::size_t in_img = g.in_channels * g.height * g.width;
    const std::size_t out_img = g.out_channels * g.out_pixels();
    const std::size_t in_grp = g.group_in() * g.height * g.width;
    const std::size_t out_grp = g.group_out() * g.out_pixels();
    const std::size_t k_grp = g.group_out() * g.patch();
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t gr = 0; gr < g.groups; ++gr)
            ws.backward_group(grad_out.data() + b * out_img + gr * out_grp, input.data() + b * in_img + gr * in_grp,
                              kernel.data() + gr * k_grp, grads.input.data() + b * in_img + gr * in_grp,
                              grads.kernel.data() + gr * k_grp, g);
    return grads;
}

// ---------------------------------------------------------------------------
// Depthwise convolution: kernel [C, 1, kh, kw]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> depthwise_conv2d_forward(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                                   std::size_t padding) {
    if (kernel.rank() != 4 || kernel.dim(1) != 1)
        throw DimensionError("depthwise_conv2d: kernel must be [C,1,kh,kw], got " + shape_str(kernel.shape()));
    require_rank(input, 4, "depthwise_conv2d input");
    const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding, input.dim(1));
    Tensor<T> out({g.batch, g.out_channels, g.out_h, g.out_w});
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t oh = 0; oh < g.out_h; ++oh)
                for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                    T acc = 0;
                    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
                        const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(padding);
                        if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
                        for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(padding);
                            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
                            acc += input.at(b, c, ih, iw) * kernel.at(c, 0, ki, kj);
                        }
                    }
                    out.at(b, c, oh, ow) = acc;
                }
    check_finite(out, "depthwise_conv2d_forward");
    return out;
}

template <typename T>
Conv2dGrads<T> depthwise_conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& kernel,
                                         std::size_t stride, std::size_t padding) {
    if (kernel.rank() != 4 || kernel.dim(1) != 1)
        throw DimensionError("depthwise_conv2d: kernel must be [C,1,kh,kw], got " + shape_str(kernel.shape()));
    require_rank(input, 4, "depthwise_conv2d input");
    const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding, input.dim(1));
    const Shape expect{g.batch, g.out_channels, g.out_h, g.out_w};
    if (grad_out.shape() != expect)
        throw DimensionError("depthwise_conv2d_backward: grad_out " + shape_str(grad_out.shape()) +
                             " != forward output " + shape_str(expect));
    Conv2dGrads<T> grads{Tensor<T>::zeros_like(input), Tensor<T>::zeros_like(kernel)};
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t oh = 0; oh < g.out_h; ++oh)
                for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                    const T go = grad_out.at(b, c, oh, ow);
                    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
                        const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(padding);
                        if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
                        for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(padding);
                            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
                            grads.kernel.at(c, 0, ki, kj) += go * input.at(b, c, ih, iw);
                            grads.input.at(b, c, ih, iw) += go * kernel.at(c, 0, ki, kj);
                        }
                    }
                }
    return grads;
}

// ---------------------------------------------------------------------------
// Dense, activations, pooling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    require_rank(input, 2, "dense_forward input");
    require_rank(weight, 2, "dense_forward weight");
    require_rank(bias, 1, "dense_forward bias");
    if (input.dim(1) != weight.dim(0) || weight.dim(1) != bias.dim(0))
        throw DimensionError("dense_forward: input axis 1 " + shape_str(input.shape()) + ", weight " +
                             shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()) + " do not chain");
    const std::size_t B = input.dim(0), D = input.dim(1), E = weight.dim(1);
    Tensor<T> out({B, E});
    Eigen::Map<const RowMatrix<T>> X(input.data(), B, D);
    Eigen::Map<const RowMatrix<T>> W(weight.data(), D, E);
    Eigen::Map<RowMatrix<T>> Y(out.data(), B, E);
    Y.noalias() = X * W;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t e = 0; e < E; ++e) out.at(b, e) += bias[e];
    check_finite(out, "dense_forward");
    return out;
}

template <typename T>
struct DenseGrads {
    Tensor<T> input, weight, bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight) {
    const std::size_t B = input.dim(0), D = input.dim(1), E = weight.dim(1);
    if (grad_out.shape() != Shape{B, E})
        throw DimensionError("dense_backward: grad_out " + shape_str(grad_out.shape()) + " does not match [B,E]");
    DenseGrads<T> g{Tensor<T>({B, D}), Tensor<T>({D, E}), Tensor<T>({E})};
    Eigen::Map<const RowMatrix<T>> G(grad_out.data(), B, E);
    Eigen::Map<const RowMatrix<T>> X(input.data(), B, D);
    Eigen::Map<const RowMatrix<T>> W(weight.data(), D, E);
    Eigen::Map<RowMatrix<T>>(g.input.data(), B, D).noalias() = G * W.transpose();
    Eigen::Map<RowMatrix<T>>(g.weight.data(), D, E).noalias() = X.transpose() * G;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t e = 0; e < E; ++e) g.bias[e] += grad_out.at(b, e);
    return g;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input) {
    check_finite(input, "relu_forward input"); // max(NaN, 0) would hide it
    Tensor<T> out = input;
    for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
    return out;
}

/// Gradient through ReLU given the forward input (subgradient 0 at 0).
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
    input.require_same_shape(grad_out, "relu_backward");
    Tensor<T> g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i)
        if (!(input[i] > T(0))) g[i] = T(0);
    return g;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
    require_rank(input, 4, "global_avg_pool");
    const std::size_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
    Tensor<T> out({B, C});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = input.data() + (b * C + c) * HW;
            T acc = 0;
            for (std::size_t i = 0; i < HW; ++i) acc += p[i];
            out.at(b, c) = acc / static_cast<T>(HW);
        }
    check_finite(out, "global_avg_pool");
    return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape) {
    if (input_shape.size() != 4 || grad_out.shape() != Shape{input_shape[0], input_shape[1]})
        throw DimensionError("global_avg_pool_backward: grad_out " + shape_str(grad_out.shape()) +
                             " does not match input " + shape_str(input_shape));
    Tensor<T> g(input_shape);
    const std::size_t B = input_shape[0], C = input_shape[1], HW = input_shape[2] * input_shape[3];
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T v = grad_out.at(b, c) / static_cast<T>(HW);
            T* p = g.data() + (b * C + c) * HW;
            std::fill(p, p + HW, v);
        }
    return g;
}

/// Row-wise softmax of a [B, N] tensor.
template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& input) {
    require_rank(input, 2, "softmax_forward");
    const std::size_t B = input.dim(0), N = input.dim(1);
    Tensor<T> out({B, N});
    for (std::size_t b = 0; b < B; ++b) {
        T mx = input.at(b, 0);
        for (std::size_t n = 1; n < N; ++n) mx = std::max(mx, input.at(b, n));
        T sum = 0;
        for (std::size_t n = 0; n < N; ++n) sum += (out.at(b, n) = std::exp(input.at(b, n) - mx));
        for (std::size_t n = 0; n < N; ++n) out.at(b, n) /= sum;
    }
    check_finite(out, "softmax_forward");
    return out;
}

/// Gradient w.r.t. the softmax input, given the softmax output.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& grad_out, const Tensor<T>& output) {
    output.require_same_shape(grad_out, "softmax_backward");
    const std::size_t B = output.dim(0), N = output.dim(1);
    Tensor<T> g({B, N});
    for (std::size_t b = 0; b < B; ++b) {
        T dot = 0;
        for (std::size_t n = 0; n < N; ++n) dot += grad_out.at(b, n) * output.at(b, n);
        for (std::size_t n = 0; n < N; ++n) g.at(b, n) = output.at(b, n) * (grad_out.at(b, n) - dot);
    }
    return g;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& input) {
    require_rank(input, 2, "log_softmax");
    const std::size_t B = input.dim(0), N = input.dim(1);
    Tensor<T> out({B, N});
    for (std::size_t b = 0; b < B; ++b) {
        T mx = input.at(b, 0);
        for (std::size_t n = 1; n < N; ++n) mx = std::max(mx, input.at(b, n));
        T sum = 0;
        for (std::size_t n = 0; n < N; ++n) sum += std::exp(input.at(b, n) - mx);
        const T lse = mx + std::log(sum);
        for (std::size_t n = 0; n < N; ++n) out.at(b, n) = input.at(b, n) - lse;
    }
    return out;
}

/// Rows must be nonnegative and sum to one within `tol`.
template <typename T>
void validate_label_rows(const Tensor<T>& labels, double tol = 1e-6) {
    require_rank(labels, 2, "labels");
    for (std::size_t b = 0; b < labels.dim(0); ++b) {
        double sum = 0;
        for (std::size_t k = 0; k < labels.dim(1); ++k) {
            const T v = labels.at(b, k);
            if (!(v >= T(0))) throw ValidationError("label row " + std::to_string(b) + " has a negative entry");
            sum += v;
        }
        if (std::abs(sum - 1.0) > tol)
            throw ValidationError("label row " + std::to_string(b) + " sums to " + std::to_string(sum) + ", not 1");
    }
}

template <typename T>
struct CrossEntropyResult {
    T loss;
    Tensor<T> grad_logits;
};

/// Mean over the batch of -sum_k labels * log_softmax(logits), for soft labels.
template <typename T>
CrossEntropyResult<T> cross_entropy_with_soft_labels(const Tensor<T>& logits, const Tensor<T>& labels) {
    require_rank(logits, 2, "cross_entropy logits");
    logits.require_same_shape(labels, "cross_entropy_with_soft_labels");
    if (!logits.all_finite()) throw NumericError("cross_entropy_with_soft_labels: non-finite logits");
    validate_label_rows(labels);
    const std::size_t B = logits.dim(0), K = logits.dim(1);
    const Tensor<T> ls = log_softmax(logits);
    CrossEntropyResult<T> r{T(0), Tensor<T>({B, K})};
    T total = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) {
            total -= labels.at(b, k) * ls.at(b, k);
            r.grad_logits.at(b, k) = (std::exp(ls.at(b, k)) - labels.at(b, k)) / static_cast<T>(B);
        }
    r.loss = total / static_cast<T>(B);
    if (!std::isfinite(r.loss)) throw NumericError("cross_entropy_with_soft_labels: non-finite loss");
    return r;
}

// ---------------------------------------------------------------------------
// Batch normalization (per channel over N, H, W)
// ---------------------------------------------------------------------------

enum class Mode { train, eval };

template <typename T>
struct BatchNormStats {
    Tensor<T> mean;
    Tensor<T> var;

    explicit BatchNormStats(std::size_t channels = 0)
        : mean(Shape{channels}, T(0)), var(Shape{channels}, T(1)) {}
};

struct BatchNormOptions {
    double eps = 1e-5;
    double momentum = 0.1;
};

template <typename T>
struct BatchNormSaved {
    Tensor<T> normalized; // x_hat
    std::vector<T> inv_std;
    Mode mode = Mode::train;
};

template <typename T>
struct BatchNormResult {
    Tensor<T> output;
    BatchNormSaved<T> saved;
};

/// Train mode normalizes by biased batch variance and folds the unbiased
/// variance into the running estimate; eval mode uses the running estimate.
template <typename T>
BatchNormResult<T> batchnorm2d_forward(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                                       BatchNormStats<T>& stats, Mode mode, BatchNormOptions opt = {}) {
    require_rank(input, 4, "batchnorm2d input");
    const std::size_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || stats.mean.shape() != Shape{C} ||
        stats.var.shape() != Shape{C})
        throw DimensionError("batchnorm2d: parameter axis 0 does not match input channel axis 1 (" +
                             std::to_string(C) + ")");
    BatchNormResult<T> r{Tensor<T>(input.shape()), {Tensor<T>(input.shape()), std::vector<T>(C), mode}};
    const std::size_t n = B * HW;
    for (std::size_t c = 0; c < C; ++c) {
        T mean, var;
        if (mode == Mode::train) {
            if (n < 2) throw ValidationError("batchnorm2d: train mode needs more than one value per channel");
            double acc = 0;
            for (std::size_t b = 0; b < B; ++b) acc += detail::lane_sum(input.data() + (b * C + c) * HW, HW);
            mean = static_cast<T>(acc / n);
            double sq = 0;
            for (std::size_t b = 0; b < B; ++b)
                sq += detail::lane_sq_dev(input.data() + (b * C + c) * HW, HW, double(mean));
            var = static_cast<T>(sq / n);
            const T m = static_cast<T>(opt.momentum);
            stats.mean[c] = (T(1) - m) * stats.mean[c] + m * mean;
            stats.var[c] = (T(1) - m) * stats.var[c] + m * static_cast<T>(sq / (n - 1));
        } else {
            mean = stats.mean[c];
            var = stats.var[c];
        }
        const T inv = T(1) / std::sqrt(var + static_cast<T>(opt.eps));
        r.saved.inv_std[c] = inv;
        for (std::size_t b = 0; b < B; ++b) {
            const T* p = input.data() + (b * C + c) * HW;
            T* xh = r.saved.normalized.data() + (b * C + c) * HW;
            T* o = r.output.data() + (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                xh[i] = (p[i] - mean) * inv;
                o[i] = gamma[c] * xh[i] + beta[c];
            }
        }
    }
    check_finite(r.output, "batchnorm2d_forward");
    return r;
}

template <typename T>
struct BatchNormGrads {
    Tensor<T> input, gamma, beta;
};

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& grad_out, const BatchNormSaved<T>& saved,
                                       const Tensor<T>& gamma) {
    saved.normalized.require_same_shape(grad_out, "batchnorm2d_backward");
    const std::size_t B = grad_out.dim(0), C = grad_out.dim(1), HW = grad_out.dim(2) * grad_out.dim(3);
    BatchNormGrads<T> g{Tensor<T>(grad_out.shape()), Tensor<T>({C}), Tensor<T>({C})};
    const T n = static_cast<T>(B * HW);
    for (std::size_t c = 0; c < C; ++c) {
        T sum_g = 0, sum_gx = 0;
        for (std::size_t b = 0; b < B; ++b) {
            const T* go = grad_out.data() + (b * C + c) * HW;
            const T* xh = saved.normalized.data() + (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                sum_g += go[i];
                sum_gx += go[i] * xh[i];
            }
        }
        g.beta[c] = sum_g;
        g.gamma[c] = sum_gx;
        const T scale = gamma[c] * saved.inv_std[c];
        for (std::size_t b = 0; b < B; ++b) {
            const T* go = grad_out.data() + (b * C + c) * HW;
            const T* xh = saved.normalized.data() + (b * C + c) * HW;
            T* gi = g.input.data() + (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i)
                gi[i] = saved.mode == Mode::train ? scale * (go[i] - sum_g / n - xh[i] * sum_gx / n) : scale * go[i];
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct SgdOptions {
    double lr = 0.01;
    double momentum = 0.0;
    double weight_decay = 0.0;
};

/// Heavy-ball SGD with coupled L2 decay:
///   v <- momentum * v + (g + wd * p);  p <- p - lr * v
template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& momentum_buffer, const SgdOptions& opt) {
    param.require_same_shape(grad, "sgd_step grad");
    param.require_same_shape(momentum_buffer, "sgd_step momentum buffer");
    const T lr = static_cast<T>(opt.lr), mu = static_cast<T>(opt.momentum), wd = static_cast<T>(opt.weight_decay);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const T g = grad[i] + wd * param[i];
        momentum_buffer[i] = mu * momentum_buffer[i] + g;
        param[i] -= lr * momentum_buffer[i];
    }
}

/// Per-epoch cosine annealing from base_lr toward zero.
inline double cosine_lr(int epoch, int max_epoch, double base_lr) {
    if (max_epoch <= 0 || epoch < 0 || epoch >= max_epoch)
        throw RangeError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(max_epoch) +
                         ")");
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / max_epoch));
}

} // namespace ddg

#pragma once

// Bottleneck residual networks whose middle k x k convolutions can be
// dynamic. Block: 1x1 -> BN -> ReLU -> kxk (static or dynamic, carries the
// stride) -> BN -> ReLU -> 1x1 -> BN, plus identity or 1x1-projection
// shortcut, then ReLU. The meta-adjuster of a dynamic block reads the block
// input.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ddg/dynamic_conv.hpp"
#include "ddg/ops.hpp"
#include "ddg/rng.hpp"
#include "ddg/tape.hpp"

namespace ddg {

enum class Variant { static_baseline, asymmetric, identical_1x1, identical_3x3 };

inline std::string to_string(Variant v) {
    switch (v) {
    case Variant::static_baseline: return "static";
    case Variant::asymmetric: return "asymmetric";
    case Variant::identical_1x1: return "identical_1x1";
    case Variant::identical_3x3: return "identical_3x3";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "static") return Variant::static_baseline;
    if (s == "asymmetric") return Variant::asymmetric;
    if (s == "identical_1x1") return Variant::identical_1x1;
    if (s == "identical_3x3") return Variant::identical_3x3;
    throw ConfigError("unknown network variant '" + s + "' (static|asymmetric|identical_1x1|identical_3x3)");
}

inline TemplateLayout layout_for(Variant v) {
    switch (v) {
    case Variant::asymmetric: return TemplateLayout::asymmetric;
    case Variant::identical_1x1: return TemplateLayout::identical_1x1;
    case Variant::identical_3x3: return TemplateLayout::identical_kxk;
    case Variant::static_baseline: break;
    }
    throw ConfigError("static variant has no kernel templates");
}

struct BlockSpec {
    std::size_t in_channels = 0, bottleneck_channels = 0, out_channels = 0;
    std::size_t stride = 1;
    bool dynamic = false;
    Variant variant = Variant::static_baseline;
};

struct NetworkSpec {
    std::size_t in_channels = 3;
    std::size_t stem_channels = 16;
    std::size_t stem_kernel = 3;
    std::size_t stem_stride = 1;
    std::size_t kernel_size = 3; // middle conv of every block
    std::size_t reduction = 4;   // meta-adjuster bottleneck ratio
    std::size_t num_classes = 5;
    std::vector<std::size_t> widths;
    std::vector<std::vector<BlockSpec>> stages;

    void validate() const {
        if (num_classes < 2) throw ConfigError("network needs at least 2 classes");
        if (stages.empty()) throw ConfigError("network needs at least one stage");
        if (stem_kernel % 2 == 0 || kernel_size % 2 == 0) throw ConfigError("kernel sizes must be odd");
        std::size_t ch = stem_channels;
        for (std::size_t s = 0; s < stages.size(); ++s) {
            if (stages[s].empty()) throw ConfigError("stage " + std::to_string(s) + " is empty");
            for (std::size_t b = 0; b < stages[s].size(); ++b) {
                const BlockSpec& bs = stages[s][b];
                const std::string where = "stage " + std::to_string(s) + " block " + std::to_string(b);
                if (bs.in_channels != ch)
                    throw ConfigError(where + ": input channels " + std::to_string(bs.in_channels) +
                                      " do not chain with previous output " + std::to_string(ch));
                if (!bs.dynamic && bs.variant != Variant::static_baseline)
                    throw ConfigError(where + ": non-dynamic block must use the static variant");
                if (bs.dynamic && bs.variant == Variant::static_baseline)
                    throw ConfigError(where + ": dynamic block needs a template variant");
                if (bs.variant == Variant::identical_3x3 && kernel_size != 3)
                    throw ConfigError(where + ": identical_3x3 templates require kernel_size 3");
                if (bs.bottleneck_channels == 0 || bs.out_channels == 0 || bs.stride == 0)
                    throw ConfigError(where + ": zero-sized block");
                ch = bs.out_channels;
            }
        }
    }

    std::size_t final_channels() const { return stages.back().back().out_channels; }

    std::size_t num_blocks() const {
        std::size_t n = 0;
        for (const auto& s : stages) n += s.size();
        return n;
    }

    /// Toy bottleneck ResNet: stem kxk conv to widths[0], then one stage per
    /// width with `blocks_per_stage` blocks, bottleneck = width / bottleneck_div,
    /// stride 2 at the first block of every stage after the first.
    static NetworkSpec toy(std::vector<std::size_t> widths, std::size_t blocks_per_stage, std::size_t num_classes,
                           Variant variant, std::size_t bottleneck_div = 2, std::size_t reduction = 4,
                           std::size_t stem_stride = 1) {
        NetworkSpec n;
        n.stem_stride = stem_stride;
        n.widths = widths;
        n.num_classes = num_classes;
        n.reduction = reduction;
        n.stem_channels = widths.at(0);
        std::size_t ch = n.stem_channels;
        for (std::size_t s = 0; s < widths.size(); ++s) {
            std::vector<BlockSpec> stage;
            for (std::size_t b = 0; b < blocks_per_stage; ++b) {
                BlockSpec bs;
                bs.in_channels = ch;
                bs.out_channels = widths[s];
                bs.bottleneck_channels = std::max<std::size_t>(1, widths[s] / bottleneck_div);
                bs.stride = (s > 0 && b == 0) ? 2 : 1;
                bs.dynamic = variant != Variant::static_baseline;
                bs.variant = variant;
                stage.push_back(bs);
                ch = bs.out_channels;
            }
            n.stages.push_back(std::move(stage));
        }
        return n;
    }

    /// ResNet-50 layout (7x7/2 stem, [3,4,6,3] bottlenecks, expansion 4),
    /// used for parameter accounting at full width.
    static NetworkSpec resnet50(std::size_t num_classes, Variant variant) {
        NetworkSpec n;
        n.stem_channels = 64;
        n.stem_kernel = 7;
        n.stem_stride = 2;
        n.num_classes = num_classes;
        n.widths = {256, 512, 1024, 2048};
        const std::size_t depth[4] = {3, 4, 6, 3};
        std::size_t ch = 64;
        for (std::size_t s = 0; s < 4; ++s) {
            std::vector<BlockSpec> stage;
            for (std::size_t b = 0; b < depth[s]; ++b) {
                BlockSpec bs{ch, n.widths[s] / 4, n.widths[s], (s > 0 && b == 0) ? 2u : 1u,
                             variant != Variant::static_baseline, variant};
                stage.push_back(bs);
                ch = bs.out_channels;
            }
            n.stages.push_back(std::move(stage));
        }
        return n;
    }
};

/// Closed-form parameter count of a spec (BatchNorm affine terms included,
/// running statistics excluded). Needs no allocation.
inline std::size_t count_parameters(const NetworkSpec& spec) {
    spec.validate();
    const std::size_t k = spec.kernel_size;
    auto conv_bn = [](std::size_t cout, std::size_t cin, std::size_t kk) { return cout * cin * kk * kk + 2 * cout; };
    std::size_t total = conv_bn(spec.stem_channels, spec.in_channels, spec.stem_kernel);
    for (const auto& stage : spec.stages)
        for (const BlockSpec& b : stage) {
            total += conv_bn(b.bottleneck_channels, b.in_channels, 1);
            if (b.dynamic)
                total += DynamicConvLayer<double>::parameter_count(layout_for(b.variant), b.bottleneck_channels,
                                                                   b.bottleneck_channels, k, b.in_channels,
                                                                   spec.reduction) +
                         2 * b.bottleneck_channels;
            else
                total += conv_bn(b.bottleneck_channels, b.bottleneck_channels, k);
            total += conv_bn(b.out_channels, b.bottleneck_channels, 1);
            if (b.stride != 1 || b.in_channels != b.out_channels) total += conv_bn(b.out_channels, b.in_channels, 1);
        }
    return total + spec.final_channels() * spec.num_classes + spec.num_classes;
}

template <typename T>
struct ConvBN {
    Var<T> weight, gamma, beta;
    BatchNormStats<T> stats;
    std::size_t stride = 1, padding = 0;

    Var<T> forward(GradTape<T>* tape, const Var<T>& x, Mode mode) {
        return ag::batchnorm2d(tape, ag::conv2d(tape, x, weight, stride, padding), gamma, beta, stats, mode);
    }
};

template <typename T>
struct Block {
    BlockSpec spec;
    ConvBN<T> reduce;                       // 1x1 in -> bottleneck
    std::optional<ConvBN<T>> middle;        // static kxk
    std::optional<DynamicConvLayer<T>> dyn; // dynamic kxk
    Var<T> middle_gamma, middle_beta;       // BN after the dynamic conv
    BatchNormStats<T> middle_stats;
    ConvBN<T> expand;                       // 1x1 bottleneck -> out
    std::optional<ConvBN<T>> shortcut;

    /// Middle kernel parameter (Theta_s for dynamic blocks).
    const Var<T>& middle_kernel() const { return dyn ? dyn->static_kernel : middle->weight; }
};

template <typename T>
struct ForwardResult {
    Var<T> logits;
    /// One [B,4] tensor per dynamic block, in execution order.
    std::vector<Tensor<T>> coefficient_trace;
    std::vector<std::size_t> trace_blocks; // block index of each trace entry
};

template <typename T>
class Network {
public:
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    /// Static weights are drawn from Rng(seed); meta-adjuster weights from an
    /// independent fork, so static and dynamic variants of the same spec and
    /// seed share every static weight. Templates start at zero.
    static Network build(const NetworkSpec& spec, std::uint64_t seed) {
        spec.validate();
        Network net;
        net.spec_ = spec;
        Rng rng(seed);
        Rng dyn_rng = rng.fork(1);
        net.stem_ = net.make_conv_bn("stem", spec.stem_channels, spec.in_channels, spec.stem_kernel, spec.stem_stride,
                                     rng);
        std::size_t idx = 0;
        for (std::size_t s = 0; s < spec.stages.size(); ++s)
            for (const BlockSpec& bs : spec.stages[s]) {
                const std::string p = "block" + std::to_string(idx++) + ".";
                Block<T> blk;
                blk.spec = bs;
                blk.reduce = net.make_conv_bn(p + "reduce", bs.bottleneck_channels, bs.in_channels, 1, 1, rng);
                const std::size_t k = spec.kernel_size;
                if (bs.dynamic) {
                    DynamicConvLayer<T> L;
                    L.static_kernel = parameter(
                        kaiming(Shape{bs.bottleneck_channels, bs.bottleneck_channels, k, k}, rng));
                    L.templates = KernelTemplateSet<T>::zeros(layout_for(bs.variant), bs.bottleneck_channels,
                                                              bs.bottleneck_channels, k);
                    L.adjuster = MetaAdjuster<T>::init(bs.in_channels, spec.reduction, dyn_rng);
                    L.stride = bs.stride;
                    L.padding = (k - 1) / 2;
                    net.add_param(p + "middle.weight", L.static_kernel);
                    for (std::size_t n = 0; n < kNumTemplates; ++n)
                        net.add_param(p + "middle.template" + std::to_string(n + 1), L.templates.v[n]);
                    net.add_param(p + "adjuster.w1", L.adjuster.w1);
                    net.add_param(p + "adjuster.b1", L.adjuster.b1);
                    net.add_param(p + "adjuster.w2", L.adjuster.w2);
                    net.add_param(p + "adjuster.b2", L.adjuster.b2);
                    blk.middle_gamma = parameter(Tensor<T>({bs.bottleneck_channels}, T(1)));
                    blk.middle_beta = parameter(Tensor<T>({bs.bottleneck_channels}));
                    blk.middle_stats = BatchNormStats<T>(bs.bottleneck_channels);
                    net.add_param(p + "middle.bn.gamma", blk.middle_gamma);
                    net.add_param(p + "middle.bn.beta", blk.middle_beta);
                    blk.dyn = std::move(L);
                } else {
                    blk.middle = net.make_conv_bn(p + "middle", bs.bottleneck_channels, bs.bottleneck_channels, k,
                                                  bs.stride, rng);
                }
                blk.expand = net.make_conv_bn(p + "expand", bs.out_channels, bs.bottleneck_channels, 1, 1, rng);
                if (bs.stride != 1 || bs.in_channels != bs.out_channels)
                    blk.shortcut = net.make_conv_bn(p + "shortcut", bs.out_channels, bs.in_channels, 1, bs.stride, rng);
                net.blocks_.push_back(std::move(blk));
            }
        // Buffers are registered after the vector stops reallocating.
        net.add_buffers("stem", net.stem_.stats);
        for (std::size_t i = 0; i < net.blocks_.size(); ++i) {
            Block<T>& b = net.blocks_[i];
            const std::string p = "block" + std::to_string(i) + ".";
            net.add_buffers(p + "reduce", b.reduce.stats);
            net.add_buffers(p + "middle", b.dyn ? b.middle_stats : b.middle->stats);
            net.add_buffers(p + "expand", b.expand.stats);
            if (b.shortcut) net.add_buffers(p + "shortcut", b.shortcut->stats);
        }
        const std::size_t C = spec.final_channels();
        const double a = 1.0 / std::sqrt(static_cast<double>(C));
        net.head_w_ = parameter(random_uniform<T>({C, spec.num_classes}, rng, -a, a));
        net.head_b_ = parameter(Tensor<T>({spec.num_classes}));
        net.add_param("head.weight", net.head_w_);
        net.add_param("head.bias", net.head_b_);
        return net;
    }

    const NetworkSpec& spec() const { return spec_; }
    const std::vector<Block<T>>& blocks() const { return blocks_; }
    std::vector<Block<T>>& blocks() { return blocks_; }

    /// Named parameters in deterministic registration order.
    const std::vector<std::pair<std::string, Var<T>>>& parameters() const { return params_; }
    /// Named BatchNorm running statistics (not trained by SGD).
    const std::vector<std::pair<std::string, Tensor<T>*>>& buffers() const { return buffers_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, p] : params_) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p->zero_grad();
    }

    /// Runs the network on a [B, C, H, W] batch. With a tape, every op is
    /// recorded for a later backward pass.
    ForwardResult<T> forward(const Tensor<T>& input, Mode mode, GradTape<T>* tape = nullptr) {
        if (input.rank() != 4 || input.dim(1) != spec_.in_channels)
            throw DimensionError("network input " + shape_str(input.shape()) + " does not match stem input channels " +
                                 std::to_string(spec_.in_channels));
        ForwardResult<T> r;
        Var<T> x = constant(input);
        try {
            x = ag::relu(tape, stem_.forward(tape, x, mode));
        } catch (const NumericError& e) {
            throw NumericError(std::string("stem: ") + e.what());
        }
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            try {
                x = block_forward(tape, blocks_[i], x, mode, i, r);
            } catch (const NumericError& e) {
                throw NumericError("block " + std::to_string(i) + ": " + e.what());
            }
        }
        try {
            r.logits = ag::dense(tape, ag::global_avg_pool(tape, x), head_w_, head_b_);
        } catch (const NumericError& e) {
            throw NumericError(std::string("head: ") + e.what());
        }
        return r;
    }

private:
    Network() = default;

    static Tensor<T> kaiming(Shape shape, Rng& rng) {
        const double fan_out = static_cast<double>(shape[0] * shape[2] * shape[3]);
        return random_normal<T>(std::move(shape), rng, std::sqrt(2.0 / fan_out));
    }

    ConvBN<T> make_conv_bn(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
                           std::size_t stride, Rng& rng) {
        ConvBN<T> c;
        c.weight = parameter(kaiming(Shape{cout, cin, k, k}, rng));
        c.gamma = parameter(Tensor<T>({cout}, T(1)));
        c.beta = parameter(Tensor<T>({cout}));
        c.stats = BatchNormStats<T>(cout);
        c.stride = stride;
        c.padding = (k - 1) / 2;
        add_param(name + ".weight", c.weight);
        add_param(name + ".bn.gamma", c.gamma);
        add_param(name + ".bn.beta", c.beta);
        return c;
    }

    void add_param(const std::string& name, const Var<T>& v) { params_.emplace_back(name, v); }

    void add_buffers(const std::string& name, BatchNormStats<T>& s) {
        buffers_.emplace_back(name + ".bn.running_mean", &s.mean);
        buffers_.emplace_back(name + ".bn.running_var", &s.var);
    }

    Var<T> block_forward(GradTape<T>* tape, Block<T>& b, const Var<T>& x, Mode mode, std::size_t index,
                         ForwardResult<T>& r) {
        Var<T> h = ag::relu(tape, b.reduce.forward(tape, x, mode));
        if (b.dyn) {
            Tensor<T> coeffs;
            h = ag::dynamic_conv(tape, h, x, *b.dyn, &coeffs);
            h = ag::batchnorm2d(tape, h, b.middle_gamma, b.middle_beta, b.middle_stats, mode);
            r.coefficient_trace.push_back(std::move(coeffs));
            r.trace_blocks.push_back(index);
        } else {
            h = b.middle->forward(tape, h, mode);
        }
        h = ag::relu(tape, h);
        h = b.expand.forward(tape, h, mode);
        Var<T> skip = b.shortcut ? b.shortcut->forward(tape, x, mode) : x;
        return ag::relu(tape, ag::add(tape, h, skip));
    }

    NetworkSpec spec_;
    ConvBN<T> stem_;
    std::vector<Block<T>> blocks_;
    Var<T> head_w_, head_b_;
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::vector<std::pair<std::string, Tensor<T>*>> buffers_;
};

} // namespace ddg

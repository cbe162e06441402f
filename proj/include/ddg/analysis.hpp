#pragma once

// Kernel magnitude matrices of the middle k x k convolutions and dumps of
// meta-adjuster coefficients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ddg/datagen.hpp"
#include "ddg/dynamic_conv.hpp"
#include "ddg/network.hpp"
#include "ddg/text.hpp"

namespace ddg {

struct KernelMagnitudeMatrix {
    std::size_t k = 0;
    std::vector<std::string> layer_names;
    std::vector<Tensor<double>> layers; // [k,k] each, max entry 1 (or all zero)
    Tensor<double> aggregate;           // mean of the layer matrices, max-normalized
};

/// Mean |w| over the (out, in) channels of a [Cout,Cin,k,k] kernel.
template <typename T>
Tensor<double> channel_mean_abs(const T* kernel, std::size_t cout, std::size_t cin, std::size_t k) {
    Tensor<double> m({k, k});
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t i = 0; i < k * k; ++i) m[i] += std::abs(static_cast<double>(kernel[(o * cin + c) * k * k + i]));
    for (auto& v : m.vec()) v /= static_cast<double>(cout * cin);
    return m;
}

inline void max_normalize(Tensor<double>& m) {
    const double mx = *std::max_element(m.vec().begin(), m.vec().end());
    if (mx > 0)
        for (auto& v : m.vec()) v /= mx;
}

/// Center row + center column of a k x k matrix vs. its four corners.
struct SkeletonContrast {
    double criss_cross = 0, corners = 0;
};

inline SkeletonContrast skeleton_contrast(const Tensor<double>& m) {
    const std::size_t k = m.dim(0), c = k / 2;
    SkeletonContrast s;
    std::size_t n = 0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j)
            if (i == c || j == c) {
                s.criss_cross += m.at(i, j);
                ++n;
            }
    s.criss_cross /= static_cast<double>(n);
    s.corners = (m.at(0, 0) + m.at(0, k - 1) + m.at(k - 1, 0) + m.at(k - 1, k - 1)) / 4.0;
    return s;
}

/// Static mode reads Theta_s (or the static middle kernel); dynamic mode needs
/// a probe batch and averages |Theta_s + dTheta(x)| over the probe samples.
template <typename T>
KernelMagnitudeMatrix kernel_magnitude(Network<T>& net, const Tensor<T>* probe = nullptr) {
    bool any_dynamic = false;
    for (const auto& b : net.blocks()) any_dynamic |= b.dyn.has_value();
    if (any_dynamic && !probe) throw UsageError("kernel magnitude of a dynamic network needs a probe input");

    std::vector<Tensor<T>> coeffs(net.blocks().size());
    if (any_dynamic) {
        const auto r = net.forward(*probe, Mode::eval);
        for (std::size_t t = 0; t < r.trace_blocks.size(); ++t) coeffs[r.trace_blocks[t]] = r.coefficient_trace[t];
    }
    KernelMagnitudeMatrix out;
    out.k = net.spec().kernel_size;
    const std::size_t k = out.k;
    out.aggregate = Tensor<double>({k, k});
    for (std::size_t i = 0; i < net.blocks().size(); ++i) {
        const Block<T>& b = net.blocks()[i];
        const std::size_t co = b.spec.bottleneck_channels, ci = b.spec.bottleneck_channels;
        Tensor<double> m({k, k});
        if (b.dyn) {
            const auto embedded = embed_templates(b.dyn->templates);
            const Tensor<T>& lam = coeffs[i];
            // running mean: a constant sequence reproduces its value exactly
            for (std::size_t s = 0; s < lam.dim(0); ++s) {
                Tensor<T> kernel = b.dyn->static_kernel->value;
                kernel += assemble_dynamic_kernel<T>(std::span<const T>(lam.data() + s * kNumTemplates, kNumTemplates),
                                                     embedded);
                const Tensor<double> ms = channel_mean_abs(kernel.data(), co, ci, k);
                for (std::size_t j = 0; j < m.size(); ++j) m[j] += (ms[j] - m[j]) / static_cast<double>(s + 1);
            }
        } else {
            m = channel_mean_abs(b.middle->weight->value.data(), co, ci, k);
        }
        max_normalize(m);
        out.aggregate += m;
        out.layers.push_back(std::move(m));
        out.layer_names.push_back("block" + std::to_string(i) + ".middle");
    }
    max_normalize(out.aggregate);
    return out;
}

inline std::string kernel_magnitude_csv(const KernelMagnitudeMatrix& kmm) {
    std::string s = "layer,name,row,col,value\n";
    auto emit = [&](const std::string& idx, const std::string& name, const Tensor<double>& m) {
        for (std::size_t i = 0; i < kmm.k; ++i)
            for (std::size_t j = 0; j < kmm.k; ++j)
                s += idx + "," + name + "," + std::to_string(i) + "," + std::to_string(j) + "," +
                     format_double(m.at(i, j)) + "\n";
    };
    for (std::size_t l = 0; l < kmm.layers.size(); ++l) emit(std::to_string(l), kmm.layer_names[l], kmm.layers[l]);
    emit("-1", "aggregate", kmm.aggregate);
    return s;
}

/// Binary 8-bit graymap, each matrix cell drawn as a `cell` x `cell` square.
inline std::string matrix_pgm(const Tensor<double>& m, std::size_t cell = 16) {
    const std::size_t k = m.dim(0), side = k * cell;
    std::string s = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
            s.push_back(static_cast<char>(
                static_cast<unsigned char>(std::lround(std::clamp(m.at(y / cell, x / cell), 0.0, 1.0) * 255.0))));
    return s;
}

// ---- coefficient dump ----

struct CoefficientRow {
    std::size_t block = 0, sample = 0;
    int domain = 0;
    std::array<double, kNumTemplates> lambda{};
};

/// One row per (sample, block), sample-major, in the order of `blocks`.
template <typename T>
std::vector<CoefficientRow> export_coefficients(Network<T>& net, const Dataset& ds,
                                                const std::vector<std::size_t>& blocks, std::size_t chunk = 128) {
    for (std::size_t b : blocks) {
        if (b >= net.blocks().size())
            throw UsageError("block index " + std::to_string(b) + " out of range (network has " +
                             std::to_string(net.blocks().size()) + " blocks)");
        if (!net.blocks()[b].dyn) throw UsageError("block " + std::to_string(b) + " is not a dynamic block");
    }
    std::vector<CoefficientRow> rows;
    for (std::size_t start = 0; start < ds.size(); start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i) idx.push_back(i);
        const Batch batch = make_batch(ds, idx);
        Tensor<T> x = batch.images.template cast<T>();
        const auto r = net.forward(x, Mode::eval);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t b : blocks) {
                const auto pos = std::find(r.trace_blocks.begin(), r.trace_blocks.end(), b) - r.trace_blocks.begin();
                const Tensor<T>& lam = r.coefficient_trace[static_cast<std::size_t>(pos)];
                CoefficientRow row{b, idx[i], ds.domains[idx[i]], {}};
                for (std::size_t n = 0; n < kNumTemplates; ++n) row.lambda[n] = lam.at(i, n);
                rows.push_back(row);
            }
    }
    return rows;
}

inline std::string coefficients_csv(const std::vector<CoefficientRow>& rows) {
    std::string s = "block,sample,domain,lambda1,lambda2,lambda3,lambda4\n";
    for (const auto& r : rows) {
        s += std::to_string(r.block) + "," + std::to_string(r.sample) + "," + std::to_string(r.domain);
        for (double v : r.lambda) s += "," + format_double(v);
        s += "\n";
    }
    return s;
}

} // namespace ddg

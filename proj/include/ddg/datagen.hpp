#pragma once

// Synthetic multi-domain shape dataset, DomainMix, and the domain-balanced
// batch sampler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ddg/error.hpp"
#include "ddg/rng.hpp"
#include "ddg/serialize.hpp"
#include "ddg/tensor.hpp"
#include "ddg/text.hpp"

namespace ddg {

inline constexpr int kMixedDomain = -1;
inline constexpr std::size_t kMaxDomains = 4;

inline const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> names{"circle", "square", "triangle", "cross", "ring"};
    return names;
}

struct SyntheticDatasetConfig {
    std::size_t num_domains = 4;
    std::size_t num_classes = 5;
    std::size_t samples_per_cell = 200;
    std::size_t image_size = 32;
    std::uint64_t seed = 0;
    double noise_std = 0.03;
    // domain 1
    double hue_degrees = 120.0;
    // domain 2
    double texture_amplitude = 0.35;
    double texture_min_period = 3.0;
    double texture_max_period = 8.0;
    // domain 3
    std::size_t blur_passes = 2;

    void validate() const {
        if (num_domains < 2) throw ConfigError("dataset.num_domains must be >= 2");
        if (num_domains > kMaxDomains)
            throw ConfigError("dataset.num_domains = " + std::to_string(num_domains) + " but only " +
                              std::to_string(kMaxDomains) + " domain styles are registered");
        if (num_classes < 2) throw ConfigError("dataset.num_classes must be >= 2");
        if (num_classes > shape_names().size())
            throw ConfigError("dataset.num_classes = " + std::to_string(num_classes) + " has no registered shape list (max " +
                              std::to_string(shape_names().size()) + ")");
        if (samples_per_cell == 0) throw ConfigError("dataset.samples_per_cell must be positive");
        if (image_size < 8) throw ConfigError("dataset.image_size must be >= 8");
        if (!(noise_std >= 0)) throw ConfigError("dataset.noise_std must be >= 0");
        if (!(texture_min_period > 0) || texture_max_period < texture_min_period)
            throw ConfigError("dataset texture period range is invalid");
    }

    KeyValues to_kv() const {
        return {{"num_domains", std::to_string(num_domains)},
                {"num_classes", std::to_string(num_classes)},
                {"samples_per_cell", std::to_string(samples_per_cell)},
                {"image_size", std::to_string(image_size)},
                {"seed", std::to_string(seed)},
                {"noise_std", format_double(noise_std)},
                {"hue_degrees", format_double(hue_degrees)},
                {"texture_amplitude", format_double(texture_amplitude)},
                {"texture_min_period", format_double(texture_min_period)},
                {"texture_max_period", format_double(texture_max_period)},
                {"blur_passes", std::to_string(blur_passes)}};
    }

    void set(const std::string& key, const std::string& v) {
        if (key == "num_domains") num_domains = parse_integer<std::size_t>(key, v);
        else if (key == "num_classes") num_classes = parse_integer<std::size_t>(key, v);
        else if (key == "samples_per_cell") samples_per_cell = parse_integer<std::size_t>(key, v);
        else if (key == "image_size") image_size = parse_integer<std::size_t>(key, v);
        else if (key == "seed") seed = parse_integer<std::uint64_t>(key, v);
        else if (key == "noise_std") noise_std = parse_double(key, v);
        else if (key == "hue_degrees") hue_degrees = parse_double(key, v);
        else if (key == "texture_amplitude") texture_amplitude = parse_double(key, v);
        else if (key == "texture_min_period") texture_min_period = parse_double(key, v);
        else if (key == "texture_max_period") texture_max_period = parse_double(key, v);
        else if (key == "blur_passes") blur_passes = parse_integer<std::size_t>(key, v);
        else throw ConfigError("unknown dataset key '" + key + "'");
    }

    bool operator==(const SyntheticDatasetConfig&) const = default;
};

struct ShapeLatent {
    double cx = 0, cy = 0, radius = 1, theta = 0;
    double foreground = 1, background = 0;
};

inline ShapeLatent sample_latent(Rng& rng, std::size_t size) {
    const double S = static_cast<double>(size);
    ShapeLatent z;
    z.cx = S / 2 + rng.uniform(-0.15, 0.15) * S;
    z.cy = S / 2 + rng.uniform(-0.15, 0.15) * S;
    z.radius = rng.uniform(0.22, 0.36) * S;
    z.theta = rng.uniform(0, 2 * std::numbers::pi);
    z.foreground = rng.uniform(0.65, 1.0);
    z.background = rng.uniform(0.0, 0.3);
    return z;
}

/// Membership test in the shape's unit frame.
inline bool inside_shape(std::size_t shape, double u, double v) {
    switch (shape) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::max(std::abs(u), std::abs(v)) <= 0.8;
    case 2: {
        const double r3 = std::sqrt(3.0);
        return v >= -0.5 && r3 * u + v <= 1.0 && -r3 * u + v <= 1.0;
    }
    case 3: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case 4: {
        const double r2 = u * u + v * v;
        return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    }
    throw ConfigError("no shape registered for class " + std::to_string(shape));
}

/// Anti-aliased (4x4 supersampled) grayscale render [S,S] with additive noise.
inline Tensor<float> render_gray(std::size_t shape, const ShapeLatent& z, std::size_t size, double noise_std,
                                 Rng& rng) {
    constexpr int ss = 4;
    Tensor<float> g({size, size});
    const double c = std::cos(z.theta), s = std::sin(z.theta);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            int hits = 0;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = x + (sx + 0.5) / ss - z.cx, py = y + (sy + 0.5) / ss - z.cy;
                    const double u = (c * px + s * py) / z.radius, v = (-s * px + c * py) / z.radius;
                    hits += inside_shape(shape, u, v);
                }
            double val = z.background + (z.foreground - z.background) * hits / double(ss * ss);
            if (noise_std > 0) val += noise_std * rng.normal();
            g.at(y, x) = static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
    return g;
}

namespace detail {

inline Tensor<float> box_blur(const Tensor<float>& g) {
    const std::size_t H = g.dim(0), W = g.dim(1);
    Tensor<float> out({H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const long yy = std::clamp<long>(long(y) + dy, 0, long(H) - 1);
                    const long xx = std::clamp<long>(long(x) + dx, 0, long(W) - 1);
                    acc += g.at(yy, xx);
                }
            out.at(y, x) = static_cast<float>(acc / 9.0);
        }
    return out;
}

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

} // namespace detail

/// Maps a grayscale render to a [3,S,S] image in the given domain's style.
inline Tensor<float> apply_domain_style(const Tensor<float>& gray, std::size_t domain,
                                        const SyntheticDatasetConfig& cfg, Rng& rng) {
    const std::size_t H = gray.dim(0), W = gray.dim(1);
    Tensor<float> img({3, H, W});
    switch (domain) {
    case 0:
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t i = 0; i < H * W; ++i) img[ch * H * W + i] = gray[i];
        break;
    case 1: {
        // invert R and B, then rotate hue about the gray axis
        const double a = cfg.hue_degrees * std::numbers::pi / 180.0;
        const double c = std::cos(a), s = std::sin(a) / std::sqrt(3.0), t = (1 - c) / 3.0;
        const double m[3][3] = {{c + t, t - s, t + s}, {t + s, c + t, t - s}, {t - s, t + s, c + t}};
        for (std::size_t i = 0; i < H * W; ++i) {
            const double rgb[3] = {1.0 - gray[i], gray[i], 1.0 - gray[i]};
            for (std::size_t ch = 0; ch < 3; ++ch)
                img[ch * H * W + i] = detail::clamp01(m[ch][0] * rgb[0] + m[ch][1] * rgb[1] + m[ch][2] * rgb[2]);
        }
        break;
    }
    case 2: {
        const double period = rng.uniform(cfg.texture_min_period, cfg.texture_max_period);
        const double phi = rng.uniform(0, std::numbers::pi);
        double psi[3];
        for (double& p : psi) p = rng.uniform(0, 2 * std::numbers::pi);
        const double fx = std::cos(phi) * 2 * std::numbers::pi / period, fy = std::sin(phi) * 2 * std::numbers::pi / period;
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    img[(ch * H + y) * W + x] = detail::clamp01(
                        gray.at(y, x) + cfg.texture_amplitude * std::sin(fx * double(x) + fy * double(y) + psi[ch]));
        break;
    }
    case 3: {
        Tensor<float> b = gray;
        for (std::size_t p = 0; p < cfg.blur_passes; ++p) b = detail::box_blur(b);
        const auto [lo, hi] = std::minmax_element(b.vec().begin(), b.vec().end());
        const double l = *lo, range = double(*hi) - double(*lo);
        for (std::size_t i = 0; i < H * W; ++i) {
            const float v = range > 1e-6 ? detail::clamp01((b[i] - l) / range) : b[i];
            for (std::size_t ch = 0; ch < 3; ++ch) img[ch * H * W + i] = v;
        }
        break;
    }
    default: throw ConfigError("no style registered for domain " + std::to_string(domain));
    }
    return img;
}

/// One sample view: image [3,S,S], label [K] (one-hot or mixture), domain.
struct DomainSample {
    Tensor<float> image;
    Tensor<float> label;
    int domain = 0;
};

inline void validate_label(const Tensor<float>& label, const char* what) {
    double s = 0;
    for (float v : label.vec()) {
        if (!(v >= 0)) throw ValidationError(std::string(what) + ": negative or NaN label entry");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw ValidationError(std::string(what) + ": label does not sum to 1");
}

struct Dataset {
    std::size_t num_classes = 0;
    Tensor<float> images; // [N,3,S,S]
    std::vector<int> labels;
    std::vector<int> domains;

    std::size_t size() const { return labels.size(); }
    std::size_t image_numel() const { return images.size() / std::max<std::size_t>(1, size()); }

    const float* image_ptr(std::size_t i) const { return images.data() + i * image_numel(); }

    Tensor<float> image(std::size_t i) const {
        Shape s(images.shape().begin() + 1, images.shape().end());
        return Tensor<float>(s, std::vector<float>(image_ptr(i), image_ptr(i) + image_numel()));
    }

    DomainSample sample(std::size_t i) const {
        DomainSample s{image(i), Tensor<float>({num_classes}), domains.at(i)};
        s.label[static_cast<std::size_t>(labels[i])] = 1.0f;
        return s;
    }

    std::uint64_t sample_hash(std::size_t i) const { return fnv1a(image_ptr(i), image_numel()); }

    std::uint64_t content_hash() const {
        std::uint64_t h = fnv1a(images.data(), images.size());
        h = fnv1a(labels.data(), labels.size(), h);
        return fnv1a(domains.data(), domains.size(), h);
    }

    std::set<int> domain_set() const { return {domains.begin(), domains.end()}; }

    Dataset subset(const std::vector<std::size_t>& idx) const {
        Dataset d;
        d.num_classes = num_classes;
        Shape s = images.shape();
        s[0] = idx.size();
        std::vector<float> data;
        data.reserve(idx.size() * image_numel());
        for (std::size_t i : idx) {
            if (i >= size()) throw RangeError("dataset subset index " + std::to_string(i) + " out of range");
            data.insert(data.end(), image_ptr(i), image_ptr(i) + image_numel());
            d.labels.push_back(labels[i]);
            d.domains.push_back(domains[i]);
        }
        d.images = Tensor<float>(s, std::move(data));
        return d;
    }

    Dataset filter_domains(const std::set<int>& keep) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < size(); ++i)
            if (keep.count(domains[i])) idx.push_back(i);
        return subset(idx);
    }

    Dataset without_domain(int d) const {
        std::set<int> keep = domain_set();
        keep.erase(d);
        return filter_domains(keep);
    }

    Tensor<float> label_matrix() const {
        Tensor<float> y({size(), num_classes});
        for (std::size_t i = 0; i < size(); ++i) y.at(i, static_cast<std::size_t>(labels[i])) = 1.0f;
        return y;
    }
};

/// Renders every (domain, class) cell. Sample (d, c, i) draws from an
/// independent stream, so any cell can be regenerated alone.
inline Dataset generate_dataset(const SyntheticDatasetConfig& cfg) {
    cfg.validate();
    const std::size_t S = cfg.image_size, n = cfg.samples_per_cell;
    const std::size_t N = cfg.num_domains * cfg.num_classes * n;
    Dataset ds;
    ds.num_classes = cfg.num_classes;
    std::vector<float> data;
    data.reserve(N * 3 * S * S);
    Rng base(cfg.seed);
    for (std::size_t d = 0; d < cfg.num_domains; ++d)
        for (std::size_t c = 0; c < cfg.num_classes; ++c)
            for (std::size_t i = 0; i < n; ++i) {
                Rng rng = base.fork((d * cfg.num_classes + c) * n + i);
                const ShapeLatent z = sample_latent(rng, S);
                const Tensor<float> g = render_gray(c, z, S, cfg.noise_std, rng);
                const Tensor<float> img = apply_domain_style(g, d, cfg, rng);
                data.insert(data.end(), img.vec().begin(), img.vec().end());
                ds.labels.push_back(static_cast<int>(c));
                ds.domains.push_back(static_cast<int>(d));
            }
    ds.images = Tensor<float>({N, 3, S, S}, std::move(data));
    return ds;
}

/// Stratified split per (domain, class) cell: the first round(fraction * n)
/// indices of each shuffled cell go to the second part.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double fraction, Rng& rng) {
    if (!(fraction >= 0 && fraction <= 1)) throw ConfigError("split fraction must be in [0,1]");
    std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < ds.size(); ++i) cells[{ds.domains[i], ds.labels[i]}].push_back(i);
    std::vector<std::size_t> a, b;
    for (auto& [key, idx] : cells) {
        rng.shuffle(idx.begin(), idx.end());
        const auto cut = static_cast<std::size_t>(std::llround(fraction * double(idx.size())));
        b.insert(b.end(), idx.begin(), idx.begin() + cut);
        a.insert(a.end(), idx.begin() + cut, idx.end());
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return {ds.subset(a), ds.subset(b)};
}

// ---- persistence: <dir>/manifest.txt + <dir>/data.ddgt ----

inline void save_dataset(const std::string& dir, const Dataset& ds, const SyntheticDatasetConfig& cfg) {
    std::filesystem::create_directories(dir);
    Tensor<double> labels({ds.size()}), domains({ds.size()});
    for (std::size_t i = 0; i < ds.size(); ++i) {
        labels[i] = ds.labels[i];
        domains[i] = ds.domains[i];
    }
    save_tensor_file(dir + "/data.ddgt", {{"images", ds.images}, {"labels", labels}, {"domains", domains}});
    std::ofstream m(dir + "/manifest.txt");
    KeyValues kv = cfg.to_kv();
    kv.emplace_back("num_samples", std::to_string(ds.size()));
    kv.emplace_back("content_hash", hex64(ds.content_hash()));
    write_kv(m, kv);
    if (!m) throw UsageError("cannot write manifest in '" + dir + "'");
}

struct LoadedDataset {
    Dataset data;
    SyntheticDatasetConfig config;
};

inline LoadedDataset load_dataset(const std::string& dir) {
    const std::string manifest_path = dir + "/manifest.txt";
    if (!std::filesystem::exists(manifest_path)) throw UsageError("dataset manifest not found: '" + manifest_path + "'");
    const auto tree = parse_ini(read_file_bytes(manifest_path), manifest_path);
    LoadedDataset out;
    std::string hash;
    for (const auto& [k, v] : tree) {
        const std::string val = v.get_value<std::string>();
        if (k == "content_hash") hash = val;
        else if (k != "num_samples") out.config.set(k, val);
    }
    const TensorFile f = load_tensor_file(dir + "/data.ddgt");
    Dataset& ds = out.data;
    ds.num_classes = out.config.num_classes;
    ds.images = find_tensor<float>(f, "images");
    const auto& labels = find_tensor<double>(f, "labels");
    const auto& domains = find_tensor<double>(f, "domains");
    if (ds.images.rank() != 4 || labels.size() != ds.images.dim(0) || domains.size() != labels.size())
        throw FormatError("dataset tensors in '" + dir + "' have inconsistent shapes");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        ds.labels.push_back(static_cast<int>(labels[i]));
        ds.domains.push_back(static_cast<int>(domains[i]));
    }
    if (hex64(ds.content_hash()) != hash)
        throw FormatError("dataset in '" + dir + "' does not match its manifest content hash");
    return out;
}

// ---- DomainMix ----

struct DomainMixOptions {
    double probability = 1.0;
    double beta_a = 1.0, beta_b = 1.0;
    bool supplement = false; // append mixed samples instead of replacing
    std::optional<double> forced_alpha; // test hook

    void validate() const {
        if (!(probability >= 0 && probability <= 1)) throw ConfigError("domainmix.probability must be in [0,1]");
        if (!(beta_a > 0 && beta_b > 0)) throw ConfigError("domainmix beta parameters must be positive");
    }
};

/// x = a*x_i + (1-a)*x_j, y = a*y_i + (1-a)*y_j with a ~ Beta(beta_a, beta_b).
inline DomainSample domain_mix(const DomainSample& si, const DomainSample& sj, Rng& rng, double beta_a,
                               double beta_b, std::optional<double> forced_alpha = std::nullopt) {
    if (si.domain == kMixedDomain || sj.domain == kMixedDomain)
        throw ValidationError("domain_mix: inputs must not be mixed samples");
    if (si.domain == sj.domain)
        throw ValidationError("domain_mix: both samples come from domain " + std::to_string(si.domain));
    si.image.require_same_shape(sj.image, "domain_mix images");
    si.label.require_same_shape(sj.label, "domain_mix labels");
    const double a = forced_alpha ? *forced_alpha : rng.beta(beta_a, beta_b);
    if (!(a >= 0 && a <= 1)) throw RangeError("domain_mix: alpha outside [0,1]");
    auto mix = [a](const Tensor<float>& p, const Tensor<float>& q) {
        Tensor<float> r(p.shape());
        for (std::size_t i = 0; i < p.size(); ++i)
            r[i] = static_cast<float>(a * double(p[i]) + (1.0 - a) * double(q[i]));
        return r;
    };
    return {mix(si.image, sj.image), mix(si.label, sj.label), kMixedDomain};
}

struct Batch {
    Tensor<float> images; // [B,3,S,S]
    Tensor<float> labels; // [B,K]
    std::vector<int> domains;

    std::size_t size() const { return domains.size(); }

    DomainSample sample(std::size_t i) const {
        const std::size_t n = images.size() / size(), K = labels.dim(1);
        Shape s(images.shape().begin() + 1, images.shape().end());
        return {Tensor<float>(s, std::vector<float>(images.data() + i * n, images.data() + (i + 1) * n)),
                Tensor<float>({K}, std::vector<float>(labels.data() + i * K, labels.data() + (i + 1) * K)),
                domains[i]};
    }

    static Batch from_samples(const std::vector<DomainSample>& xs) {
        if (xs.empty()) throw ValidationError("empty batch");
        Batch b;
        Shape s = xs[0].image.shape();
        s.insert(s.begin(), xs.size());
        std::vector<float> img, lab;
        for (const auto& x : xs) {
            img.insert(img.end(), x.image.vec().begin(), x.image.vec().end());
            lab.insert(lab.end(), x.label.vec().begin(), x.label.vec().end());
            b.domains.push_back(x.domain);
        }
        b.images = Tensor<float>(s, std::move(img));
        b.labels = Tensor<float>({xs.size(), xs[0].label.size()}, std::move(lab));
        return b;
    }
};

inline Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw ValidationError("empty batch");
    const std::size_t n = ds.image_numel(), K = ds.num_classes;
    Shape s = ds.images.shape();
    s[0] = idx.size();
    Batch b;
    std::vector<float> img;
    img.reserve(idx.size() * n);
    b.labels = Tensor<float>({idx.size(), K});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const std::size_t i = idx[r];
        img.insert(img.end(), ds.image_ptr(i), ds.image_ptr(i) + n);
        b.labels.at(r, static_cast<std::size_t>(ds.labels[i])) = 1.0f;
        b.domains.push_back(ds.domains[i]);
    }
    b.images = Tensor<float>(s, std::move(img));
    return b;
}

/// In-batch DomainMix: each element is, with the configured probability,
/// mixed with a uniformly chosen batch element from a different domain.
/// Probability 0 consumes no randomness.
inline Batch apply_domain_mix(const Batch& batch, Rng& rng, const DomainMixOptions& opt) {
    opt.validate();
    if (opt.probability <= 0) return batch;
    std::vector<DomainSample> orig, out;
    for (std::size_t i = 0; i < batch.size(); ++i) orig.push_back(batch.sample(i));
    if (opt.supplement) out = orig;
    std::vector<std::size_t> partners;
    for (std::size_t i = 0; i < orig.size(); ++i) {
        const bool mix = rng.uniform() < opt.probability;
        partners.clear();
        for (std::size_t j = 0; j < orig.size(); ++j)
            if (orig[j].domain != orig[i].domain && orig[j].domain != kMixedDomain) partners.push_back(j);
        if (mix && !partners.empty() && orig[i].domain != kMixedDomain) {
            const std::size_t j = partners[rng.below(partners.size())];
            out.push_back(domain_mix(orig[i], orig[j], rng, opt.beta_a, opt.beta_b, opt.forced_alpha));
        } else if (!opt.supplement) {
            out.push_back(orig[i]);
        }
    }
    return Batch::from_samples(out);
}

/// One epoch of batches with exactly batch_size / M samples from each of the
/// M domains present. Per-domain order and in-batch order are shuffled.
inline std::vector<std::vector<std::size_t>> domain_balanced_batches(const Dataset& ds, std::size_t batch_size,
                                                                     Rng& rng) {
    const std::set<int> doms = ds.domain_set();
    if (doms.empty()) throw ValidationError("domain_balanced_batches: empty dataset");
    const std::size_t M = doms.size();
    if (batch_size == 0 || batch_size % M != 0)
        throw ConfigError("batch_size " + std::to_string(batch_size) + " is not divisible by the " +
                          std::to_string(M) + " source domains");
    const std::size_t per = batch_size / M;
    std::vector<std::vector<std::size_t>> by_domain;
    std::size_t nb = SIZE_MAX;
    for (int d : doms) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (ds.domains[i] == d) idx.push_back(i);
        rng.shuffle(idx.begin(), idx.end());
        nb = std::min(nb, idx.size() / per);
        by_domain.push_back(std::move(idx));
    }
    if (nb == 0) throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds the smallest domain");
    std::vector<std::vector<std::size_t>> batches(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        for (const auto& idx : by_domain) batches[b].insert(batches[b].end(), idx.begin() + b * per, idx.begin() + (b + 1) * per);
        rng.shuffle(batches[b].begin(), batches[b].end());
    }
    return batches;
}

} // namespace ddg

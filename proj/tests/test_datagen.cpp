#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "ddg/datagen.hpp"

using namespace ddg;

namespace {

SyntheticDatasetConfig small_cfg(std::size_t n = 6) {
    SyntheticDatasetConfig c;
    c.samples_per_cell = n;
    c.seed = 17;
    return c;
}

DomainSample one_hot_sample(std::size_t k, std::size_t K, int domain, Rng& rng) {
    DomainSample s{random_uniform<float>({3, 8, 8}, rng, 0, 1), Tensor<float>({K}), domain};
    s.label[k] = 1.0f;
    return s;
}

} // namespace

TEST(Datagen, DeterministicAndBalanced) {
    const auto a = generate_dataset(small_cfg());
    const auto b = generate_dataset(small_cfg());
    EXPECT_TRUE(bitwise_equal(a.images, b.images));
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ(a.domains, b.domains);
    EXPECT_EQ(a.size(), 4u * 5u * 6u);
    EXPECT_EQ(a.images.shape(), (Shape{120, 3, 32, 32}));
    std::map<std::pair<int, int>, int> cells;
    for (std::size_t i = 0; i < a.size(); ++i) ++cells[{a.domains[i], a.labels[i]}];
    EXPECT_EQ(cells.size(), 20u);
    for (const auto& [k, n] : cells) EXPECT_EQ(n, 6);
    auto c = small_cfg();
    c.seed = 18;
    EXPECT_FALSE(bitwise_equal(generate_dataset(c).images, a.images));
}

TEST(Datagen, PixelsInUnitInterval) {
    const auto ds = generate_dataset(small_cfg(4));
    for (float v : ds.images.vec()) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
    }
}

TEST(Datagen, Domain0VersusDomain1DifferOnSameLatent) {
    SyntheticDatasetConfig cfg;
    for (std::size_t shape = 0; shape < 5; ++shape)
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(seed);
            const auto z = sample_latent(rng, 32);
            const auto g = render_gray(shape, z, 32, cfg.noise_std, rng);
            Rng r0(1), r1(1);
            const auto a = apply_domain_style(g, 0, cfg, r0);
            const auto b = apply_domain_style(g, 1, cfg, r1);
            std::size_t differ = 0;
            for (std::size_t i = 0; i < a.size(); ++i) differ += std::abs(a[i] - b[i]) > 0.1f;
            EXPECT_GE(double(differ) / double(a.size()), 0.30) << "shape " << shape << " seed " << seed;
        }
}

TEST(Datagen, StylesAreDistinct) {
    SyntheticDatasetConfig cfg;
    Rng rng(3);
    const auto z = sample_latent(rng, 32);
    const auto g = render_gray(2, z, 32, cfg.noise_std, rng);
    std::vector<Tensor<float>> imgs;
    for (std::size_t d = 0; d < 4; ++d) {
        Rng r(5);
        imgs.push_back(apply_domain_style(g, d, cfg, r));
    }
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = i + 1; j < 4; ++j) EXPECT_GT(max_abs_diff(imgs[i], imgs[j]), 0.1) << i << " " << j;
}

TEST(Datagen, ShapeSilhouettesDiffer) {
    // noiseless renders of the same latent: every pair of classes differs
    ShapeLatent z{16, 16, 10, 0.3, 1.0, 0.0};
    Rng rng(0);
    std::vector<Tensor<float>> r;
    for (std::size_t s = 0; s < 5; ++s) r.push_back(render_gray(s, z, 32, 0.0, rng));
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = i + 1; j < 5; ++j) EXPECT_GT(max_abs_diff(r[i], r[j]), 0.5);
}

TEST(Datagen, ConfigErrors) {
    auto c = small_cfg();
    c.num_classes = 6;
    EXPECT_THROW(generate_dataset(c), ConfigError);
    c = small_cfg();
    c.num_domains = 1;
    EXPECT_THROW(generate_dataset(c), ConfigError);
    c = small_cfg();
    c.num_domains = 5;
    EXPECT_THROW(generate_dataset(c), ConfigError);
    EXPECT_THROW(c.set("no_such_key", "1"), ConfigError);
    EXPECT_THROW(c.set("noise_std", "abc"), ConfigError);
}

TEST(Datagen, SaveLoadRoundTrip) {
    const auto dir = (std::filesystem::temp_directory_path() / "ddg_test_dataset").string();
    std::filesystem::remove_all(dir);
    auto cfg = small_cfg(2);
    cfg.noise_std = 0.1 / 3.0;
    const auto ds = generate_dataset(cfg);
    save_dataset(dir, ds, cfg);
    const auto loaded = load_dataset(dir);
    EXPECT_TRUE(bitwise_equal(loaded.data.images, ds.images));
    EXPECT_EQ(loaded.data.labels, ds.labels);
    EXPECT_EQ(loaded.data.domains, ds.domains);
    EXPECT_EQ(loaded.config, cfg);
    // tampering is detected
    auto f = load_tensor_file(dir + "/data.ddgt");
    std::get<Tensor<float>>(f[0].tensor)[0] += 0.25f;
    save_tensor_file(dir + "/data.ddgt", f);
    EXPECT_THROW(load_dataset(dir), FormatError);
    EXPECT_THROW(load_dataset(dir + "/missing"), UsageError);
    std::filesystem::remove_all(dir);
}

TEST(Datagen, SplitsAreDisjointAndStratified) {
    const auto ds = generate_dataset(small_cfg(10));
    Rng rng(1);
    auto [train, val] = split_dataset(ds, 0.2, rng);
    EXPECT_EQ(train.size() + val.size(), ds.size());
    EXPECT_EQ(val.size(), 4u * 5u * 2u);
    std::set<std::uint64_t> h;
    for (std::size_t i = 0; i < train.size(); ++i) h.insert(train.sample_hash(i));
    for (std::size_t i = 0; i < val.size(); ++i) EXPECT_EQ(h.count(val.sample_hash(i)), 0u);
    const auto src = ds.without_domain(2);
    EXPECT_EQ(src.domain_set(), (std::set<int>{0, 1, 3}));
    EXPECT_EQ(src.size(), 3u * 5u * 10u);
}

// ---- DomainMix ----

TEST(DomainMix, AlphaOneIsIdentity) {
    Rng rng(2);
    const auto a = one_hot_sample(1, 5, 0, rng), b = one_hot_sample(3, 5, 2, rng);
    const auto m = domain_mix(a, b, rng, 1, 1, 1.0);
    EXPECT_TRUE(bitwise_equal(m.image, a.image));
    EXPECT_TRUE(bitwise_equal(m.label, a.label));
    EXPECT_EQ(m.domain, kMixedDomain);
}

TEST(DomainMix, HalfMidpointLabel) {
    Rng rng(2);
    const auto a = one_hot_sample(0, 5, 0, rng), b = one_hot_sample(2, 5, 1, rng);
    const auto m = domain_mix(a, b, rng, 1, 1, 0.5);
    EXPECT_TRUE(bitwise_equal(m.label, Tensor<float>({5}, std::vector<float>{0.5f, 0, 0.5f, 0, 0})));
}

TEST(DomainMix, ConvexHullAndLabelSum) {
    Rng rng(4);
    for (int t = 0; t < 1000; ++t) {
        const auto a = one_hot_sample(rng.below(5), 5, 0, rng), b = one_hot_sample(rng.below(5), 5, 3, rng);
        const auto m = domain_mix(a, b, rng, 0.4, 0.7);
        double s = 0;
        for (float v : m.label.vec()) {
            EXPECT_GE(v, 0.0f);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
        for (std::size_t i = 0; i < m.image.size(); ++i) {
            ASSERT_GE(m.image[i], std::min(a.image[i], b.image[i]));
            ASSERT_LE(m.image[i], std::max(a.image[i], b.image[i]));
        }
    }
}

TEST(DomainMix, Contracts) {
    Rng rng(1);
    const auto a = one_hot_sample(0, 5, 1, rng), b = one_hot_sample(1, 5, 1, rng);
    EXPECT_THROW(domain_mix(a, b, rng, 1, 1), ValidationError);
    auto mixed = a;
    mixed.domain = kMixedDomain;
    auto c = one_hot_sample(1, 5, 2, rng);
    EXPECT_THROW(domain_mix(mixed, c, rng, 1, 1), ValidationError);
    auto small = one_hot_sample(1, 5, 2, rng);
    small.image = Tensor<float>({3, 4, 4});
    EXPECT_THROW(domain_mix(a, small, rng, 1, 1), DimensionError);
}

TEST(DomainMix, BetaMeanWithinThreeStandardErrors) {
    Rng rng(99);
    const double a = 2.0, b = 5.0;
    const int n = 100000;
    double s = 0;
    for (int i = 0; i < n; ++i) s += rng.beta(a, b);
    const double mean = a / (a + b), var = a * b / ((a + b) * (a + b) * (a + b + 1));
    EXPECT_LT(std::abs(s / n - mean), 3 * std::sqrt(var / n));
}

TEST(DomainMix, BatchReplaceAndSupplement) {
    const auto ds = generate_dataset(small_cfg(4)).without_domain(3);
    Rng rng(8);
    const auto plan = domain_balanced_batches(ds, 12, rng);
    const Batch batch = make_batch(ds, plan[0]);
    Rng r1(3), r2(3);
    DomainMixOptions opt;
    const Batch replaced = apply_domain_mix(batch, r1, opt);
    EXPECT_EQ(replaced.size(), 12u);
    for (int d : replaced.domains) EXPECT_EQ(d, kMixedDomain);
    for (std::size_t i = 0; i < replaced.size(); ++i) {
        double s = 0;
        for (std::size_t k = 0; k < 5; ++k) s += replaced.labels.at(i, k);
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
    opt.supplement = true;
    const Batch sup = apply_domain_mix(batch, r2, opt);
    EXPECT_EQ(sup.size(), 24u);
    // probability 0 leaves the batch untouched and draws nothing
    opt = DomainMixOptions{};
    opt.probability = 0;
    Rng r3(3);
    const auto before = r3.state();
    const Batch same = apply_domain_mix(batch, r3, opt);
    EXPECT_TRUE(bitwise_equal(same.images, batch.images));
    EXPECT_EQ(r3.state(), before);
}

// ---- sampler ----

TEST(Sampler, SixteenPerDomain) {
    const auto ds = generate_dataset(small_cfg(32)); // 4 domains x 160
    Rng rng(0);
    const auto plan = domain_balanced_batches(ds, 64, rng);
    EXPECT_EQ(plan.size(), 160u / 16u);
    std::vector<std::size_t> seen;
    for (const auto& b : plan) {
        ASSERT_EQ(b.size(), 64u);
        std::map<int, int> per;
        for (auto i : b) ++per[ds.domains[i]];
        for (const auto& [d, n] : per) EXPECT_EQ(n, 16);
        seen.insert(seen.end(), b.begin(), b.end());
    }
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], i); // a permutation
}

TEST(Sampler, ThreeSourceDomains) {
    const auto ds = generate_dataset(small_cfg(48)).without_domain(0);
    Rng rng(0);
    for (const auto& b : domain_balanced_batches(ds, 48, rng)) {
        std::map<int, int> per;
        for (auto i : b) ++per[ds.domains[i]];
        EXPECT_EQ(per.size(), 3u);
        for (const auto& [d, n] : per) EXPECT_EQ(n, 16);
    }
}

TEST(Sampler, SeededOrderAndErrors) {
    const auto ds = generate_dataset(small_cfg(8));
    Rng a(5), b(5), c(6);
    const auto pa = domain_balanced_batches(ds, 8, a);
    EXPECT_EQ(pa, domain_balanced_batches(ds, 8, b));
    EXPECT_NE(pa, domain_balanced_batches(ds, 8, c));
    EXPECT_THROW(domain_balanced_batches(ds, 6, a), ConfigError);
}

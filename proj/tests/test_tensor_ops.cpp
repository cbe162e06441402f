#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ddg/ops.hpp"
#include "ddg/rng.hpp"
#include "ddg/tape.hpp"
#include "test_util.hpp"

using namespace ddg;
using ddg::testing::check_gradient;
using ddg::testing::conv2d_reference;
using ddg::testing::dot;
using ddg::testing::rand_t;

// ---------------------------------------------------------------- tensor / rng

TEST(Tensor, ShapeDataInvariant) {
    EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), DimensionError);
    Tensor<float> t({2, 3, 4});
    EXPECT_EQ(t.size(), 24u);
    EXPECT_THROW(t.reshaped({5, 5}), DimensionError);
}

TEST(Rng, SameSeedSameSequence) {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 1000; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        differs |= x != c.next_u64();
    }
    EXPECT_TRUE(differs);
}

TEST(Rng, PinnedFirstDraws) {
    // xoshiro256** seeded by splitmix64(0); pins the algorithm.
    Rng r(0);
    std::uint64_t sm = 0;
    std::array<std::uint64_t, 4> s{};
    for (auto& w : s) w = Rng::splitmix64(sm);
    const auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    EXPECT_EQ(r.next_u64(), rotl(s[1] * 5, 7) * 9);
    EXPECT_EQ(s[0], 0xE220A8397B1DCDAFULL);
}

TEST(Rng, SeededTensorsBitwiseIdentical) {
    Rng a(7), b(7);
    auto ta = random_normal<float>({3, 4, 5}, a);
    auto tb = random_normal<float>({3, 4, 5}, b);
    EXPECT_TRUE(bitwise_equal(ta, tb));
}

TEST(Rng, BetaMeanWithinThreeStandardErrors) {
    Rng r(123);
    for (auto [a, b] : {std::pair{1.0, 1.0}, std::pair{0.2, 0.2}, std::pair{2.0, 5.0}}) {
        const int n = 100000;
        double sum = 0;
        for (int i = 0; i < n; ++i) {
            const double x = r.beta(a, b);
            ASSERT_GE(x, 0.0);
            ASSERT_LE(x, 1.0);
            sum += x;
        }
        const double mean = a / (a + b);
        const double var = a * b / ((a + b) * (a + b) * (a + b + 1));
        EXPECT_NEAR(sum / n, mean, 3 * std::sqrt(var / n)) << "Beta(" << a << "," << b << ")";
    }
}

// ---------------------------------------------------------------------- conv2d

TEST(Conv2d, AllOnesSum) {
    Tensor<double> x({1, 1, 3, 3}, 1.0), k({1, 1, 3, 3}, 1.0);
    auto y = conv2d_forward(x, k, 1, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, IdentityKernel) {
    Rng rng(1);
    auto x = rand_t({2, 1, 4, 5}, rng);
    Tensor<double> k({1, 1, 1, 1}, 1.0);
    EXPECT_TRUE(bitwise_equal(conv2d_forward(x, k, 1, 0), x));
}

TEST(Conv2d, MatchesNestedLoopOracle) {
    Rng rng(2);
    auto x = rand_t({2, 3, 5, 5}, rng);
    auto k = rand_t({4, 3, 3, 3}, rng);
    EXPECT_LT(max_abs_diff(conv2d_forward(x, k, 1, 1), conv2d_reference(x, k, 1, 1)), 1e-12);
}

TEST(Conv2d, MatchesOracleAcrossShapes) {
    Rng rng(3);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t B = 1 + rng.below(3), Cin = 1 + rng.below(4), Cout = 1 + rng.below(4);
        const std::size_t k = 1 + 2 * rng.below(2), stride = 1 + rng.below(2), pad = rng.below(2);
        const std::size_t H = k + rng.below(5), W = k + rng.below(5);
        auto x = rand_t({B, Cin, H, W}, rng);
        auto w = rand_t({Cout, Cin, k, k + (trial % 2 ? 0 : 0)}, rng);
        EXPECT_LT(max_abs_diff(conv2d_forward(x, w, stride, pad), conv2d_reference(x, w, stride, pad)), 1e-12);
    }
}

TEST(Conv2d, OutputExtent) {
    Tensor<double> x({1, 2, 7, 6}), k({3, 2, 3, 3});
    auto y = conv2d_forward(x, k, 2, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 3}));
}

TEST(Conv2d, ShapeErrorsNameAxes) {
    Tensor<double> x({1, 2, 5, 5}), k({3, 4, 3, 3});
    try {
        conv2d_forward(x, k, 1, 0);
        FAIL();
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos);
    }
    EXPECT_THROW(conv2d_forward(Tensor<double>({1, 1, 2, 2}), Tensor<double>({1, 1, 3, 3}), 1, 0), DimensionError);
    EXPECT_THROW(conv2d_forward(Tensor<double>({1, 1, 4, 4}), Tensor<double>({1, 1, 3, 3}), 0, 0), DimensionError);
}

TEST(Conv2dBackward, ZeroGradOut) {
    Rng rng(4);
    auto x = rand_t({2, 2, 4, 4}, rng);
    auto k = rand_t({3, 2, 3, 3}, rng);
    auto g = conv2d_backward(Tensor<double>({2, 3, 4, 4}), x, k, 1, 1);
    EXPECT_EQ(g.input, Tensor<double>::zeros_like(x));
    EXPECT_EQ(g.kernel, Tensor<double>::zeros_like(k));
}

TEST(Conv2dBackward, SinglePixelThroughIdentity) {
    Rng rng(5);
    auto x = rand_t({1, 1, 3, 4}, rng);
    Tensor<double> k({1, 1, 1, 1}, 1.0);
    Tensor<double> go({1, 1, 3, 4});
    go.at(0, 0, 1, 2) = 2.5;
    auto g = conv2d_backward(go, x, k, 1, 0);
    EXPECT_EQ(g.input, go);
}

TEST(Conv2dBackward, FiniteDifferences) {
    Rng rng(6);
    struct Case {
        Shape x, k;
        std::size_t stride, pad, groups;
    };
    for (const Case& c : {Case{{2, 3, 5, 5}, {4, 3, 3, 3}, 1, 1, 1}, Case{{1, 2, 6, 5}, {3, 2, 3, 1}, 2, 1, 1},
                          Case{{2, 2, 4, 4}, {2, 2, 1, 1}, 1, 0, 1}, Case{{1, 4, 5, 5}, {6, 2, 3, 3}, 1, 1, 2}}) {
        auto x = rand_t(c.x, rng);
        auto k = rand_t(c.k, rng);
        auto y = conv2d_forward(x, k, c.stride, c.pad, c.groups);
        auto w = rand_t(y.shape(), rng);
        auto g = conv2d_backward(w, x, k, c.stride, c.pad, c.groups);
        auto loss = [&] { return dot(conv2d_forward(x, k, c.stride, c.pad, c.groups), w); };
        EXPECT_LT(check_gradient(x, g.input, loss), 1e-6);
        EXPECT_LT(check_gradient(k, g.kernel, loss), 1e-6);
    }
}

// ------------------------------------------------------------------- depthwise

TEST(Depthwise, IdentityKernels) {
    Rng rng(7);
    auto x = rand_t({1, 2, 4, 4}, rng);
    Tensor<double> k({2, 1, 1, 1}, 1.0);
    EXPECT_EQ(depthwise_conv2d_forward(x, k, 1, 0), x);
}

TEST(Depthwise, AllOnes) {
    Tensor<double> x({1, 2, 3, 3}, 1.0), k({2, 1, 3, 3}, 1.0);
    auto y = depthwise_conv2d_forward(x, k, 1, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 2, 1, 1}));
    EXPECT_EQ(y[0], 9.0);
    EXPECT_EQ(y[1], 9.0);
}

TEST(Depthwise, EqualsBlockDiagonalFullConv) {
    Rng rng(8);
    for (int t = 0; t < 10; ++t) {
        const std::size_t C = 1 + rng.below(4), stride = 1 + rng.below(2), pad = rng.below(2);
        auto x = rand_t({2, C, 6, 5}, rng);
        auto k = rand_t({C, 1, 3, 3}, rng);
        Tensor<double> full({C, C, 3, 3});
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j) full.at(c, c, i, j) = k.at(c, 0, i, j);
        EXPECT_LT(max_abs_diff(depthwise_conv2d_forward(x, k, stride, pad), conv2d_forward(x, full, stride, pad)),
                  1e-12);
    }
}

TEST(Depthwise, FiniteDifferences) {
    Rng rng(9);
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 0}, {1, 0}}) {
        auto x = rand_t({2, 3, 5, 6}, rng);
        auto k = rand_t({3, 1, 3, 3}, rng);
        auto w = rand_t(depthwise_conv2d_forward(x, k, stride, pad).shape(), rng);
        auto g = depthwise_conv2d_backward(w, x, k, stride, pad);
        auto loss = [&] { return dot(depthwise_conv2d_forward(x, k, stride, pad), w); };
        EXPECT_LT(check_gradient(x, g.input, loss), 1e-6);
        EXPECT_LT(check_gradient(k, g.kernel, loss), 1e-6);
    }
}

// ------------------------------------------------------- dense, relu, gap, softmax

TEST(Dense, FiniteDifferences) {
    Rng rng(10);
    for (auto [B, D, E] : {std::tuple<std::size_t, std::size_t, std::size_t>{3, 4, 5}, {1, 7, 2}, {5, 2, 3}}) {
        auto x = rand_t({B, D}, rng);
        auto W = rand_t({D, E}, rng);
        auto b = rand_t({E}, rng);
        auto w = rand_t({B, E}, rng);
        auto g = dense_backward(w, x, W);
        auto loss = [&] { return dot(dense_forward(x, W, b), w); };
        EXPECT_LT(check_gradient(x, g.input, loss), 1e-6);
        EXPECT_LT(check_gradient(W, g.weight, loss), 1e-6);
        EXPECT_LT(check_gradient(b, g.bias, loss), 1e-6);
    }
}

TEST(Relu, FiniteDifferences) {
    Rng rng(11);
    for (const Shape& s : {Shape{2, 3, 4, 4}, Shape{5, 7}, Shape{1, 1, 9, 2}}) {
        auto x = rand_t(s, rng);
        for (auto& v : x.vec())
            if (std::abs(v) < 1e-3) v = 0.5; // keep clear of the kink
        auto w = rand_t(s, rng);
        auto loss = [&] { return dot(relu_forward(x), w); };
        EXPECT_LT(check_gradient(x, relu_backward(w, x), loss), 1e-6);
    }
}

TEST(GlobalAvgPool, FiniteDifferences) {
    Rng rng(12);
    for (const Shape& s : {Shape{2, 3, 4, 4}, Shape{1, 5, 3, 2}, Shape{3, 1, 1, 1}}) {
        auto x = rand_t(s, rng);
        auto w = rand_t({s[0], s[1]}, rng);
        auto loss = [&] { return dot(global_avg_pool(x), w); };
        EXPECT_LT(check_gradient(x, global_avg_pool_backward(w, s), loss), 1e-6);
    }
}

TEST(Softmax, RowsOnSimplex) {
    Rng rng(13);
    auto x = rand_t({50, 6}, rng, -20, 20);
    auto s = softmax_forward(x);
    for (std::size_t b = 0; b < 50; ++b) {
        double sum = 0;
        for (std::size_t n = 0; n < 6; ++n) {
            EXPECT_GE(s.at(b, n), 0.0);
            sum += s.at(b, n);
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    auto sf = softmax_forward(x.cast<float>());
    for (std::size_t b = 0; b < 50; ++b) {
        float sum = 0;
        for (std::size_t n = 0; n < 6; ++n) sum += sf.at(b, n);
        EXPECT_NEAR(sum, 1.0f, 1e-6f);
    }
}

TEST(Softmax, FiniteDifferences) {
    Rng rng(14);
    for (const Shape& s : {Shape{3, 4}, Shape{1, 2}, Shape{4, 7}}) {
        auto x = rand_t(s, rng, -3, 3);
        auto w = rand_t(s, rng);
        auto loss = [&] { return dot(softmax_forward(x), w); };
        EXPECT_LT(check_gradient(x, softmax_backward(w, softmax_forward(x)), loss), 1e-6);
    }
}

// --------------------------------------------------------------- cross-entropy

TEST(CrossEntropy, ConfidentCorrectClass) {
    Tensor<double> logits({1, 3}, std::vector<double>{100, 0, 0});
    Tensor<double> labels({1, 3}, std::vector<double>{1, 0, 0});
    EXPECT_LT(cross_entropy_with_soft_labels(logits, labels).loss, 1e-6);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
    for (std::size_t K : {2u, 5u, 7u}) {
        Tensor<double> logits({2, K}, 0.3);
        Tensor<double> labels({2, K}, 1.0 / K);
        EXPECT_NEAR(cross_entropy_with_soft_labels(logits, labels).loss, std::log(double(K)), 1e-12);
    }
}

TEST(CrossEntropy, UniformLabelsLowerBound) {
    // For uniform labels the loss is -mean(log_softmax) >= log K.
    Rng rng(15);
    auto logits = rand_t({4, 5}, rng, -4, 4);
    Tensor<double> labels({4, 5}, 0.2);
    EXPECT_GE(cross_entropy_with_soft_labels(logits, labels).loss, std::log(5.0) - 1e-12);
}

TEST(CrossEntropy, SoftLabelUniformLogits) {
    Tensor<double> logits({1, 2});
    Tensor<double> labels({1, 2}, std::vector<double>{0.7, 0.3});
    EXPECT_NEAR(cross_entropy_with_soft_labels(logits, labels).loss, 0.693147, 1e-6);
}

TEST(CrossEntropy, RejectsUnnormalizedLabels) {
    Tensor<double> logits({1, 2});
    EXPECT_THROW(cross_entropy_with_soft_labels(logits, Tensor<double>({1, 2}, std::vector<double>{0.7, 0.4})),
                 ValidationError);
    EXPECT_THROW(cross_entropy_with_soft_labels(logits, Tensor<double>({1, 2}, std::vector<double>{1.5, -0.5})),
                 ValidationError);
}

TEST(CrossEntropy, FiniteDifferences) {
    Rng rng(16);
    for (auto [B, K] : {std::pair<std::size_t, std::size_t>{3, 5}, {1, 2}, {6, 4}}) {
        auto logits = rand_t({B, K}, rng, -3, 3);
        auto labels = softmax_forward(rand_t({B, K}, rng, -2, 2));
        auto r = cross_entropy_with_soft_labels(logits, labels);
        auto loss = [&] { return cross_entropy_with_soft_labels(logits, labels).loss; };
        EXPECT_LT(check_gradient(logits, r.grad_logits, loss), 1e-6);
    }
}

// ------------------------------------------------------------------ batchnorm

TEST(BatchNorm, StandardizedInputPassesThrough) {
    Rng rng(17);
    auto x = rand_t({4, 2, 5, 5}, rng);
    // Standardize each channel exactly.
    for (std::size_t c = 0; c < 2; ++c) {
        double m = 0, v = 0;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 25; ++i) m += x.data()[(b * 2 + c) * 25 + i];
        m /= 100;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 25; ++i) v += std::pow(x.data()[(b * 2 + c) * 25 + i] - m, 2);
        v /= 100;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 25; ++i) {
                double& e = x.data()[(b * 2 + c) * 25 + i];
                e = (e - m) / std::sqrt(v);
            }
    }
    BatchNormStats<double> st(2);
    auto r = batchnorm2d_forward(x, Tensor<double>({2}, 1.0), Tensor<double>({2}), st, Mode::train);
    // Only the epsilon changes the scale: 1/sqrt(1 + 1e-5).
    EXPECT_LT(max_abs_diff(r.output, x), 1e-5 * 4);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
    Rng rng(18);
    auto x = rand_t({2, 3, 4, 4}, rng);
    BatchNormStats<double> st(3);
    auto r = batchnorm2d_forward(x, Tensor<double>({3}), Tensor<double>({3}, 5.0), st, Mode::train);
    for (double v : r.output.vec()) EXPECT_EQ(v, 5.0);
}

TEST(BatchNorm, RunningStatsMomentumAndEvalDefaults) {
    Rng rng(19);
    auto x = rand_t({2, 1, 3, 3}, rng);
    BatchNormStats<double> st(1);
    // Eval before any training step uses mean 0, var 1.
    auto e = batchnorm2d_forward(x, Tensor<double>({1}, 1.0), Tensor<double>({1}), st, Mode::eval);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(e.output[i], x[i] / std::sqrt(1 + 1e-5), 1e-15);
    double m = 0;
    for (double v : x.vec()) m += v;
    m /= 18;
    double ss = 0;
    for (double v : x.vec()) ss += (v - m) * (v - m);
    batchnorm2d_forward(x, Tensor<double>({1}, 1.0), Tensor<double>({1}), st, Mode::train);
    EXPECT_NEAR(st.mean[0], 0.1 * m, 1e-15);
    EXPECT_NEAR(st.var[0], 0.9 + 0.1 * ss / 17, 1e-15);
}

TEST(BatchNorm, ChannelMismatch) {
    BatchNormStats<double> st(2);
    EXPECT_THROW(batchnorm2d_forward(Tensor<double>({1, 3, 2, 2}), Tensor<double>({2}), Tensor<double>({2}), st,
                                     Mode::train),
                 DimensionError);
}

TEST(BatchNorm, FiniteDifferences) {
    Rng rng(20);
    for (const Shape& s : {Shape{2, 3, 4, 4}, Shape{3, 2, 2, 3}, Shape{1, 4, 3, 3}}) {
        for (Mode mode : {Mode::train, Mode::eval}) {
            auto x = rand_t(s, rng);
            auto gamma = rand_t({s[1]}, rng, 0.5, 1.5);
            auto beta = rand_t({s[1]}, rng);
            BatchNormStats<double> st(s[1]);
            st.mean = rand_t({s[1]}, rng);
            st.var = rand_t({s[1]}, rng, 0.5, 2);
            const BatchNormStats<double> frozen = st;
            auto w = rand_t(s, rng);
            auto fwd = [&] {
                BatchNormStats<double> tmp = frozen;
                return batchnorm2d_forward(x, gamma, beta, tmp, mode);
            };
            auto g = batchnorm2d_backward(w, fwd().saved, gamma);
            auto loss = [&] { return dot(fwd().output, w); };
            EXPECT_LT(check_gradient(x, g.input, loss), 1e-6);
            EXPECT_LT(check_gradient(gamma, g.gamma, loss), 1e-6);
            EXPECT_LT(check_gradient(beta, g.beta, loss), 1e-6);
        }
    }
}

// ----------------------------------------------------------------- optimization

TEST(CosineLr, Values) {
    EXPECT_EQ(cosine_lr(0, 30, 0.05), 0.05);
    EXPECT_NEAR(cosine_lr(15, 30, 0.05), 0.025, 1e-17);
    EXPECT_NEAR(cosine_lr(25, 50, 1e-3), 5e-4, 1e-18);
    EXPECT_THROW(cosine_lr(30, 30, 0.05), RangeError);
    EXPECT_THROW(cosine_lr(-1, 30, 0.05), RangeError);
}

TEST(CosineLr, StrictlyDecreasing) {
    for (int max_epoch : {2, 3, 17, 50})
        for (int e = 1; e < max_epoch; ++e) EXPECT_LT(cosine_lr(e, max_epoch, 0.1), cosine_lr(e - 1, max_epoch, 0.1));
}

TEST(Sgd, MomentumAndDecay) {
    Tensor<double> p({2}, std::vector<double>{1.0, -2.0});
    Tensor<double> g({2}, std::vector<double>{0.5, 0.5});
    Tensor<double> buf({2});
    SgdOptions opt{0.1, 0.9, 0.01};
    sgd_step(p, g, buf, opt);
    // v = g + wd*p; p -= lr*v
    EXPECT_NEAR(buf[0], 0.51, 1e-15);
    EXPECT_NEAR(p[0], 1.0 - 0.051, 1e-15);
    sgd_step(p, g, buf, opt);
    const double v2 = 0.9 * 0.51 + 0.5 + 0.01 * 0.949;
    EXPECT_NEAR(buf[0], v2, 1e-15);
    EXPECT_NEAR(p[0], 0.949 - 0.1 * v2, 1e-15);
}

// ------------------------------------------------------------------------ tape

TEST(GradTape, ReplaysInReverseOrder) {
    GradTape<double> tape;
    std::vector<int> order;
    for (int i = 0; i < 5; ++i) tape.record([&order, i] { order.push_back(i); });
    tape.replay();
    EXPECT_EQ(order, (std::vector<int>{4, 3, 2, 1, 0}));
    EXPECT_EQ(tape.size(), 0u);
}

TEST(GradTape, ParametersAccumulateUntilZeroed) {
    Rng rng(21);
    auto w = parameter(rand_t({2, 3}, rng));
    auto b = parameter(Tensor<double>({3}));
    auto x = constant(rand_t({4, 2}, rng));
    Tensor<double> labels({4, 3}, 1.0 / 3);
    Tensor<double> first;
    for (int pass = 0; pass < 2; ++pass) {
        GradTape<double> tape;
        auto loss = ag::cross_entropy(&tape, ag::dense(&tape, x, w, b), labels);
        tape.backward(loss);
        if (pass == 0) first = w->grad;
    }
    Tensor<double> twice = first;
    twice += first;
    EXPECT_LT(max_abs_diff(w->grad, twice), 1e-15);
    w->zero_grad();
    EXPECT_EQ(w->grad, Tensor<double>::zeros_like(w->value));
}

TEST(NonFinite, SurfacedAsError) {
    Tensor<double> x({1, 1, 2, 2}, 1.0);
    x[0] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(conv2d_forward(x, Tensor<double>({1, 1, 1, 1}, 1.0), 1, 0), NumericError);
    EXPECT_THROW(relu_forward(Tensor<double>({1}, std::nan(""))), NumericError);
}

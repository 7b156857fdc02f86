#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "sinewich/model.hpp"
#include "sinewich/numerics.hpp"
#include "sinewich/random.hpp"
#include "test_support.hpp"

using namespace sinewich;
using sinewich::testing::random_tensor;

namespace {

// Direct evaluation on an explicitly zero-padded copy of the input.
Tensor naive_conv(const Tensor& x, const ConvKernel& k) {
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t ph = k.kh() / 2, pw = k.kw() / 2;
    Tensor padded({c, h + 2 * ph, w + 2 * pw});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) padded(ch, y + ph, xx + pw) = x(ch, y, xx);
    Tensor out({k.out_channels(), h, w});
    for (std::size_t o = 0; o < k.out_channels(); ++o)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) {
                double s = 0.0;
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t u = 0; u < k.kh(); ++u)
                        for (std::size_t v = 0; v < k.kw(); ++v) s += k(o, ch, u, v) * padded(ch, y + u, xx + v);
                out(o, y, xx) = s;
            }
    return out;
}

// Cyclic Jacobi eigenvalues of a symmetric matrix.
std::vector<double> jacobi_eigenvalues(Tensor a) {
    const std::size_t n = a.dim(0);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
    std::sort(ev.rbegin(), ev.rend());
    return ev;
}

}  // namespace

TEST(Conv2d, MatchesDirectEvaluationOnPaddedInput) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        RandomStream rng(seed, 0);
        const std::size_t c = 1 + rng.below(4), o = 1 + rng.below(4);
        const std::size_t kh = 2 * rng.below(3) + 1, kw = 2 * rng.below(3) + 1;
        const std::size_t h = 1 + rng.below(9), w = 1 + rng.below(9);
        const Tensor x = random_tensor({c, h, w}, seed, 1);
        const ConvKernel k(random_tensor({o, c, kh, kw}, seed, 2));
        EXPECT_LT(max_abs_diff(conv2d(x, k), naive_conv(x, k)), 1e-12) << "seed " << seed;
    }
}

TEST(Conv2d, IdentityKernelReturnsInput) {
    const Tensor x = random_tensor({2, 5, 4}, 1);
    ConvKernel k(2, 2, 3, 3);
    k(0, 0, 1, 1) = 1.0;
    k(1, 1, 1, 1) = 1.0;
    EXPECT_EQ(conv2d(x, k), x);
}

TEST(Conv2d, RejectsStrideAndChannelMismatch) {
    const Tensor x = random_tensor({2, 4, 4}, 1);
    EXPECT_THROW(conv2d(x, ConvKernel(1, 2, 3, 3), 2), ContractViolation);
    EXPECT_THROW(conv2d(x, ConvKernel(1, 3, 3, 3)), ContractViolation);
    EXPECT_THROW(ConvKernel(Tensor({1, 1, 2, 3})), ContractViolation);
}

TEST(Conv2d, BackwardInputIsTheAdjoint) {
    const Tensor x = random_tensor({3, 6, 7}, 4, 0);
    const ConvKernel k(random_tensor({2, 3, 5, 3}, 4, 1));
    const Tensor u = random_tensor({2, 6, 7}, 4, 2);
    EXPECT_NEAR(dot(conv2d(x, k), u), dot(x, conv2d_backward_input(u, k)), 1e-10);
}

TEST(Conv2d, KernelGradientMatchesFiniteDifferences) {
    ParameterSet p;
    p.add("k", random_tensor({2, 3, 3, 3}, 5, 0));
    const Tensor x = random_tensor({3, 5, 6}, 5, 1);
    const Tensor u = random_tensor({2, 5, 6}, 5, 2);
    GradientBundle g{{Tensor({2, 3, 3, 3})}};
    conv2d_accumulate_kernel_grad(x, u, g.grads[0]);
    const GradCheckReport r = check_gradients(p, [&] { return dot(u, conv2d(x, ConvKernel(p.value(0)))); }, g);
    EXPECT_LT(r.worst(), 1e-7);
}

TEST(SingularValues, MatchJacobiEigenvaluesOfGramMatrix) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Tensor m = random_tensor({7, 4}, seed);
        const std::vector<double> sv = singular_values(m);
        const std::vector<double> ev = jacobi_eigenvalues(matmul(transpose(m), m));
        ASSERT_EQ(sv.size(), 4u);
        for (std::size_t i = 0; i < sv.size(); ++i) EXPECT_NEAR(sv[i], std::sqrt(std::max(0.0, ev[i])), 1e-10);
        EXPECT_TRUE(std::is_sorted(sv.rbegin(), sv.rend()));
    }
}

TEST(SingularValues, DiagonalMatrix) {
    const std::vector<double> sv = singular_values(Tensor({3, 3}, {3, 0, 0, 0, -5, 0, 0, 0, 1}));
    EXPECT_NEAR(sv[0], 5.0, 1e-14);
    EXPECT_NEAR(sv[1], 3.0, 1e-14);
    EXPECT_NEAR(sv[2], 1.0, 1e-14);
}

TEST(GaussianKernel, ThreeByThreeValues) {
    const Tensor g = gaussian_kernel(3, 1.0);
    const double e1 = std::exp(-0.5), e2 = std::exp(-1.0);
    const double z = 1.0 + 4.0 * e1 + 4.0 * e2;
    EXPECT_NEAR(g(1, 1), 1.0 / z, 1e-15);
    EXPECT_NEAR(g(0, 1), e1 / z, 1e-15);
    EXPECT_NEAR(g(0, 0), e2 / z, 1e-15);
    EXPECT_NEAR(g(1, 1), 0.20418, 1e-5);
    EXPECT_NEAR(g(0, 1), 0.12384, 1e-5);
    EXPECT_NEAR(g(0, 0), 0.07511, 1e-5);
}

TEST(GaussianKernel, NormalizedSymmetricAndValidated) {
    const Tensor g = gaussian_kernel(7, 1.0);
    EXPECT_NEAR(g.sum(), 1.0, 1e-15);
    for (std::size_t u = 0; u < 7; ++u)
        for (std::size_t v = 0; v < 7; ++v) EXPECT_EQ(g(u, v), g(v, 6 - u));
    EXPECT_EQ(gaussian_kernel(1, 2.0)(0, 0), 1.0);
    EXPECT_THROW(gaussian_kernel(4, 1.0), ContractViolation);
    EXPECT_THROW(gaussian_kernel(3, 0.0), ContractViolation);
}

TEST(Resampling, UpsampleAndPoolAdjoints) {
    const Tensor x = random_tensor({2, 3, 4}, 8, 0);
    const Tensor u = random_tensor({2, 6, 12}, 8, 1);
    EXPECT_NEAR(dot(upsample_nearest(x, 6, 12), u), dot(x, upsample_nearest_backward(u, 3, 4)), 1e-12);
    const Tensor y = random_tensor({2, 6, 8}, 8, 2);
    const Tensor v = random_tensor({2, 3, 4}, 8, 3);
    EXPECT_NEAR(dot(avg_pool2(y), v), dot(y, avg_pool2_backward(v)), 1e-12);
    EXPECT_THROW(avg_pool2(Tensor({1, 3, 4})), ContractViolation);
    EXPECT_THROW(upsample_nearest(x, 5, 12), ContractViolation);
}

// Known-answer vectors from the Random123 distribution (kat_vectors, philox4x32 10 rounds).
TEST(Philox, KnownAnswerVectors) {
    using A = std::array<std::uint32_t, 4>;
    EXPECT_EQ(RandomStream::philox({0, 0, 0, 0}, {0, 0}), (A{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
    EXPECT_EQ(RandomStream::philox({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}),
              (A{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
    EXPECT_EQ(RandomStream::philox({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}),
              (A{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(RandomStream, DeterministicAndStreamsDiffer) {
    RandomStream a(42, 3), b(42, 3), c(42, 4), d(43, 3);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 100; ++i) {
        const std::uint64_t x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        seen.insert(x);
        seen.insert(c.next_u64());
        seen.insert(d.next_u64());
    }
    EXPECT_EQ(seen.size(), 300u);
}

TEST(RandomStream, UniformAndNormalMoments) {
    RandomStream rng(7, 0);
    constexpr int n = 200'000;
    double su = 0, suu = 0, sn = 0, snn = 0, snnnn = 0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        su += u;
        suu += u * u;
        const double z = rng.normal();
        sn += z;
        snn += z * z;
        snnnn += z * z * z * z;
    }
    EXPECT_NEAR(su / n, 0.5, 0.005);
    EXPECT_NEAR(suu / n - 0.25, 1.0 / 12.0, 0.002);
    EXPECT_NEAR(sn / n, 0.0, 0.01);
    EXPECT_NEAR(snn / n, 1.0, 0.015);
    EXPECT_NEAR(snnnn / n, 3.0, 0.1);
}

TEST(RandomStream, BelowIsUnbiased) {
    RandomStream rng(9, 1);
    std::array<int, 7> counts{};
    for (int i = 0; i < 70'000; ++i) ++counts[rng.below(7)];
    for (int c : counts) EXPECT_NEAR(c, 10'000, 450);
}

TEST(ParallelFor, EveryIndexOnceAndExceptionsPropagate) {
    std::vector<int> hits(57, 0);
    parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
    EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                     if (i == 5) throw std::runtime_error("boom");
                 }),
                 std::runtime_error);
}

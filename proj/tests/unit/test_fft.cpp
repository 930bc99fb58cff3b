#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "ls4/fft.hpp"

using namespace ls4;

TEST(Fft, UnitImpulseIsFlat) {
    auto out = fft(ComplexBuf({1, 0, 0, 0}, {0, 0, 0, 0}));
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(out.re[i], 1.0, 1e-15);
        EXPECT_NEAR(out.im[i], 0.0, 1e-15);
    }
}

TEST(Fft, ConstantConcentratesAtZero) {
    auto out = fft(ComplexBuf({1, 1, 1, 1}, {0, 0, 0, 0}));
    EXPECT_NEAR(out.re[0], 4.0, 1e-15);
    for (std::size_t i = 1; i < 4; ++i) {
        EXPECT_NEAR(out.re[i], 0.0, 1e-15);
        EXPECT_NEAR(out.im[i], 0.0, 1e-15);
    }
}

TEST(Fft, RoundTrip) {
    ComplexBuf x(test::random_vector(64, 1), test::random_vector(64, 2));
    auto back = ifft(fft(x));
    for (std::size_t i = 0; i < 64; ++i) {
        EXPECT_LT(std::abs(back.re[i] - x.re[i]), 1e-12);
        EXPECT_LT(std::abs(back.im[i] - x.im[i]), 1e-12);
    }
}

TEST(Fft, Linearity) {
    ComplexBuf x(test::random_vector(32, 3), test::random_vector(32, 4));
    ComplexBuf y(test::random_vector(32, 5), test::random_vector(32, 6));
    const double a = 0.7, b = -1.3;
    ComplexBuf mix(32);
    for (std::size_t i = 0; i < 32; ++i) {
        mix.re[i] = a * x.re[i] + b * y.re[i];
        mix.im[i] = a * x.im[i] + b * y.im[i];
    }
    auto fx = fft(x), fy = fft(y), fm = fft(mix);
    for (std::size_t i = 0; i < 32; ++i) {
        EXPECT_NEAR(fm.re[i], a * fx.re[i] + b * fy.re[i], 1e-12);
        EXPECT_NEAR(fm.im[i], a * fx.im[i] + b * fy.im[i], 1e-12);
    }
}

TEST(Fft, MatchesNaiveDft) {
    ComplexBuf x(test::random_vector(16, 7), test::random_vector(16, 8));
    auto out = fft(x);
    for (std::size_t k = 0; k < 16; ++k) {
        double re = 0, im = 0;
        for (std::size_t j = 0; j < 16; ++j) {
            const double ang = -2.0 * M_PI * static_cast<double>(j * k) / 16.0;
            re += x.re[j] * std::cos(ang) - x.im[j] * std::sin(ang);
            im += x.re[j] * std::sin(ang) + x.im[j] * std::cos(ang);
        }
        EXPECT_NEAR(out.re[k], re, 1e-12);
        EXPECT_NEAR(out.im[k], im, 1e-12);
    }
}

TEST(Fft, RejectsNonPowerOfTwo) {
    EXPECT_THROW(fft(ComplexBuf(6)), std::invalid_argument);
    EXPECT_THROW(FftPlan(12), std::invalid_argument);
}

TEST(CausalConv, IdentityAndDelay) {
    std::vector<double> s{1, 2, 3};
    auto id = causal_conv(s, std::vector<double>{1, 0, 0});
    auto delay = causal_conv(s, std::vector<double>{0, 1, 0});
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(id[i], s[i], 1e-14);
        EXPECT_NEAR(delay[i], i == 0 ? 0.0 : s[i - 1], 1e-14);
    }
}

TEST(CausalConv, MatchesDirectSumAllLengths) {
    for (std::size_t L = 1; L <= 64; ++L) {
        auto x = test::random_vector(L, 100 + static_cast<unsigned>(L));
        auto k = test::random_vector(L, 300 + static_cast<unsigned>(L));
        auto fast = causal_conv(x, k);
        auto slow = test::direct_conv(x, k);
        for (std::size_t i = 0; i < L; ++i) ASSERT_LT(std::abs(fast[i] - slow[i]), 1e-10) << "L=" << L;
    }
}

TEST(CausalConv, Length33) {
    auto x = test::random_vector(33, 11), k = test::random_vector(33, 12);
    auto fast = causal_conv(x, k);
    auto slow = test::direct_conv(x, k);
    for (std::size_t i = 0; i < 33; ++i) EXPECT_LT(std::abs(fast[i] - slow[i]), 1e-10);
}

TEST(CausalConv, LengthMismatchThrows) {
    EXPECT_THROW(causal_conv(std::vector<double>{1, 2}, std::vector<double>{1}), std::invalid_argument);
}

TEST(CausalConv, CorrelateIsAdjoint) {
    const std::size_t L = 19;
    auto x = test::random_vector(L, 21), k = test::random_vector(L, 22), g = test::random_vector(L, 23);
    auto y = causal_conv(x, k);
    auto xt = causal_correlate(g, k);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < L; ++i) {
        lhs += g[i] * y[i];
        rhs += xt[i] * x[i];
    }
    EXPECT_NEAR(lhs, rhs, 1e-12);
}

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "helpers.hpp"
#include "ls4/metrics.hpp"

using namespace ls4;
using namespace ls4::metrics;

namespace {

Tensor normal_batch(std::size_t S, std::size_t L, std::uint64_t seed, double mean = 0.0, double sd = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(mean, sd);
    Tensor t({S, L, 1});
    for (auto& v : t.storage()) v = d(rng);
    return t;
}

// Noisy sinusoids with random phase and frequency.
Tensor waves(std::size_t S, std::size_t L, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi), freq(0.15, 0.35);
    std::normal_distribution<double> noise(0.0, 0.05);
    Tensor t({S, L, 1});
    for (std::size_t s = 0; s < S; ++s) {
        const double ph = phase(rng), f = freq(rng);
        for (std::size_t l = 0; l < L; ++l) t.at(s, l, 0) = std::sin(f * static_cast<double>(l) + ph) + noise(rng);
    }
    return t;
}

double crps_pairs(const std::vector<double>& x, double y) {
    double a = 0.0, b = 0.0;
    for (double u : x) {
        a += std::abs(u - y);
        for (double v : x) b += std::abs(u - v);
    }
    const auto S = static_cast<double>(x.size());
    return a / S - 0.5 * b / (S * S);
}

}  // namespace

TEST(Histogram, NormalizedDensity) {
    Tensor v = test::random_tensor({1000}, 1, -2.0, 3.0);
    Histogram h = histogram(v.data(), -2.0, 3.0, 50);
    double total = 0.0;
    for (double d : h.density) {
        EXPECT_GE(d, 0.0);
        total += d * h.width();
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
    EXPECT_THROW(histogram(v.data(), 0.0, 0.0, 10), std::invalid_argument);
}

TEST(Marginal, SelfScoreIsZero) {
    Tensor a = normal_batch(50, 8, 1);
    EXPECT_EQ(marginal_score(a, a), 0.0);
}

TEST(Marginal, DisjointSupportsGiveTwo) {
    Tensor a = test::random_tensor({40, 5, 1}, 2, 0.0, 1.0), b = test::random_tensor({30, 5, 1}, 3, 5.0, 6.0);
    EXPECT_NEAR(marginal_score(a, b), 2.0, 1e-12);
    EXPECT_NEAR(marginal_score(a, b, 50, MarginalMode::pooled), 2.0, 1e-12);
}

TEST(Marginal, SymmetricAndBounded) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        Tensor a = normal_batch(60, 6, s), b = normal_batch(80, 6, s + 10, 0.5, 2.0);
        const double ab = marginal_score(a, b), ba = marginal_score(b, a);
        EXPECT_NEAR(ab, ba, 1e-12);
        EXPECT_GE(ab, 0.0);
        EXPECT_LE(ab, 2.0);
    }
}

TEST(Marginal, SamplingNoiseBaseline) {
    // Two independent N(0, 1) samples of 10^4 values; the score is pure sampling noise.
    Tensor a = normal_batch(10000, 1, 4), b = normal_batch(10000, 1, 5);
    EXPECT_LT(marginal_score(a, b), 0.15);
}

TEST(Marginal, StepSelectionAndErrors) {
    Tensor a = normal_batch(20, 4, 6), b = a;
    for (std::size_t s = 0; s < 20; ++s) b.at(s, 3, 0) += 100.0;
    EXPECT_EQ(marginal_score(a, b, 50, MarginalMode::per_step, {0, 1, 2}), 0.0);
    EXPECT_NEAR(marginal_score(a, b, 50, MarginalMode::per_step, {3}), 2.0, 1e-12);
    EXPECT_THROW(marginal_score(Tensor({0, 4, 1}), b), std::invalid_argument);
    EXPECT_THROW(marginal_score(a, b, 50, MarginalMode::per_step, {9}), std::invalid_argument);
}

TEST(Mse, Examples) {
    Tensor t = test::random_tensor({2, 3}, 7);
    EXPECT_EQ(mse(t, t), 0.0);
    Tensor p = t;
    for (auto& v : p.storage()) v += 1.0;
    EXPECT_NEAR(mse(p, t), 1.0, 1e-15);
    Tensor a({4}, std::vector<double>{1.0, 2.0, 3.0, 4.0}), b({4}, std::vector<double>{0.0, 0.0, 3.0, 10.0});
    Tensor m({4}, std::vector<double>{1.0, 1.0, 0.0, 0.0});
    EXPECT_DOUBLE_EQ(mse(a, b, m), (1.0 + 4.0) / 2.0);
    EXPECT_THROW(mse(a, b, Tensor({4})), std::invalid_argument);
}

TEST(Crps, SingleMemberIsAbsoluteError) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        Tensor e = test::random_tensor({1, 7}, s), y = test::random_tensor({7}, s + 50);
        double mae = 0.0;
        for (std::size_t i = 0; i < 7; ++i) mae += std::abs(e[i] - y[i]) / 7.0;
        EXPECT_NEAR(crps(e, y), mae, 1e-12);
    }
}

TEST(Crps, DegenerateAtTarget) {
    EXPECT_EQ(crps_point({2.5, 2.5, 2.5}, 2.5), 0.0);
    EXPECT_GT(crps_point({2.5, 2.5, 2.6}, 2.5), 0.0);
}

TEST(Crps, MatchesPairwiseFormula) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        Tensor x = test::random_tensor({17}, s, -3.0, 3.0);
        std::vector<double> v(x.data().begin(), x.data().end());
        const double y = 0.1 * static_cast<double>(s) - 0.4;
        EXPECT_NEAR(crps_point(v, y), crps_pairs(v, y), 1e-12);
        EXPECT_GE(crps_point(v, y), 0.0);
    }
}

TEST(Crps, GaussianClosedForm) {
    Tensor e = normal_batch(10000, 1, 8).reshaped({10000, 1});
    const double closed = (std::sqrt(2.0) - 1.0) / std::sqrt(std::numbers::pi);
    EXPECT_NEAR(crps(e, Tensor({1})), closed, 0.01);
}

TEST(Crps, ShapeErrors) {
    EXPECT_THROW(crps(Tensor({3, 4}), Tensor({5})), std::invalid_argument);
    EXPECT_THROW(crps_point({}, 0.0), std::invalid_argument);
}

namespace {

EvalConfig quick_eval() {
    EvalConfig c;
    c.width = 8;
    c.state = 8;
    c.epochs = 30;
    c.batch_size = 64;
    c.horizon = 4;
    return c;
}

}  // namespace

TEST(Classification, SeparableControl) {
    Tensor real = waves(100, 24, 1), zeros({100, 24, 1});
    const double s = classification_score(real, zeros, quick_eval(), 3);
    EXPECT_GE(s, 0.0);
    EXPECT_LT(s, 0.05);
}

TEST(Classification, IndistinguishableNearLogTwo) {
    Tensor pool = waves(400, 24, 2);
    Tensor a({200, 24, 1}), b({200, 24, 1});
    std::copy_n(pool.storage().begin(), a.size(), a.storage().begin());
    std::copy(pool.storage().begin() + static_cast<long>(a.size()), pool.storage().end(), b.storage().begin());
    double mean = 0.0;
    for (std::uint64_t s = 0; s < 3; ++s) mean += classification_score(a, b, quick_eval(), s) / 3.0;
    EXPECT_NEAR(mean, std::log(2.0), 0.1);
}

TEST(Classification, RejectsImbalance) {
    EXPECT_THROW(classification_score(waves(20, 8, 1), waves(19, 8, 2), quick_eval(), 0), std::invalid_argument);
}

TEST(Prediction, DeterministicAndComparableAcrossRealDraws) {
    Tensor test = waves(60, 32, 3), train = waves(120, 32, 4), other = waves(120, 32, 5);
    const EvalConfig cfg = quick_eval();
    EXPECT_EQ(prediction_score(test, train, cfg, 1), prediction_score(test, train, cfg, 1));
    double base = 0.0, alt = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        base += prediction_score(test, train, cfg, s) / 5.0;
        alt += prediction_score(test, other, cfg, s) / 5.0;
    }
    EXPECT_LT(alt, 2.0 * base);
    EXPECT_LT(base, 2.0 * alt);
}

TEST(Prediction, NoiseTrainingCarriesNoSignal) {
    const EvalConfig cfg = quick_eval();
    Tensor test = waves(60, 32, 6), noise = normal_batch(120, 32, 7);
    double mean = 0.0, var = 0.0, n = 0.0;
    for (std::size_t s = 0; s < 60; ++s)
        for (std::size_t l = 1; l < 32; ++l) mean += test.at(s, l, 0), n += 1.0;
    mean /= n;
    for (std::size_t s = 0; s < 60; ++s)
        for (std::size_t l = 1; l < 32; ++l) var += (test.at(s, l, 0) - mean) * (test.at(s, l, 0) - mean) / n;
    EXPECT_GE(prediction_score(test, noise, cfg, 2), var);
    EXPECT_LT(prediction_score(test, waves(120, 32, 8), cfg, 2), var);
}

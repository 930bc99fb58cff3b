#include <gtest/gtest.h>

#include <cmath>

#include "ls4/bench.hpp"

using namespace ls4::bench;

TEST(Bench, FitRecoversExactNLogN) {
    std::vector<std::size_t> L{80, 320, 1280, 5120};
    std::vector<double> t;
    for (auto l : L) t.push_back(0.25 * l * std::log2(static_cast<double>(l)));
    const ScalingFit f = fit_nlogn(L, t);
    EXPECT_NEAR(f.c, 0.25, 1e-12);
    EXPECT_NEAR(f.worst_ratio, 1.0, 1e-12);
}

TEST(Bench, FitFlagsQuadraticGrowth) {
    std::vector<std::size_t> L{80, 320, 1280, 5120, 20480};
    std::vector<double> t;
    for (auto l : L) t.push_back(1e-3 * static_cast<double>(l) * static_cast<double>(l));
    EXPECT_FALSE(fit_nlogn(L, t).within(2.0));
}

TEST(Bench, FitWorstRatioByHand) {
    // ratios t/(L log2 L) of 1 and 4 -> geometric mean 2, worst factor 2
    std::vector<std::size_t> L{4, 16};
    std::vector<double> t{8.0, 4.0 * 64.0};
    const ScalingFit f = fit_nlogn(L, t);
    EXPECT_NEAR(f.c, 2.0, 1e-12);
    EXPECT_NEAR(f.worst_ratio, 2.0, 1e-12);
    EXPECT_TRUE(f.within(2.0));
}

TEST(Bench, LogLogSlope) {
    std::vector<std::size_t> L{10, 100, 1000};
    EXPECT_NEAR(loglog_slope(L, {3.0, 30.0, 300.0}), 1.0, 1e-12);
    EXPECT_NEAR(loglog_slope(L, {1.0, 100.0, 10000.0}), 2.0, 1e-12);
    EXPECT_THROW(loglog_slope({10}, {1.0}), std::invalid_argument);
}

TEST(Bench, ModesAgreeOnLossAndReportTimes) {
    BenchConfig cfg;
    cfg.lengths = {16, 40};
    cfg.batch = 3;
    cfg.heads = 2;
    cfg.state = 8;
    cfg.iterations = 2;
    const auto t = run_bench(cfg);
    ASSERT_EQ(t.size(), 4u);
    for (std::size_t i = 0; i < t.size(); i += 2) {
        EXPECT_EQ(t[i].mode, Mode::conv);
        EXPECT_EQ(t[i + 1].mode, Mode::recurrent);
        EXPECT_EQ(t[i].length, t[i + 1].length);
        EXPECT_NEAR(t[i].loss, t[i + 1].loss, 1e-9 * (1.0 + std::abs(t[i].loss)));
        EXPECT_GT(t[i].train_ms, 0.0);
        EXPECT_GT(t[i + 1].infer_ms, 0.0);
    }
    EXPECT_EQ(train_times(t, Mode::recurrent).size(), 2u);
    EXPECT_GT(speedup(t, 40), 0.0);
    EXPECT_THROW(speedup(t, 17), std::invalid_argument);
}

TEST(Bench, ConfigValidation) {
    BenchConfig cfg;
    cfg.iterations = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = BenchConfig{};
    cfg.lengths = {1};
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    EXPECT_THROW(parse_mode("fft"), std::invalid_argument);
    EXPECT_EQ(parse_mode(mode_name(Mode::recurrent)), Mode::recurrent);
}

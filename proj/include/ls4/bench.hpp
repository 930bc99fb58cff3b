#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace ls4::bench {

enum class Mode { conv, recurrent };

std::string mode_name(Mode m);
Mode parse_mode(const std::string& s);

struct BenchConfig {
    std::vector<std::size_t> lengths{80, 320, 1280, 5120, 20480};
    std::vector<Mode> modes{Mode::conv, Mode::recurrent};
    std::size_t batch = 32;
    std::size_t heads = 4;
    std::size_t state = 64;
    std::size_t iterations = 100;  // timed training iterations per (length, mode)
    std::size_t inference_repeats = 1;
    double delta = 1.0;
    unsigned long long seed = 0;

    void validate() const;
};

struct Timing {
    std::size_t length = 0;
    Mode mode = Mode::conv;
    std::size_t iterations = 0;
    double train_ms = 0.0;  // median forward+backward time of one iteration
    double infer_ms = 0.0;  // median forward-only time of one batch
    double loss = 0.0;      // value of the training loss, identical across modes up to round-off
};

/// Runs the warm-up iteration (discarded), then the timed iterations, for every length and mode.
/// Both modes share the same HiPPO-initialized parameters and inputs at each length.
/// `progress` sees each record as it completes; returning false stops the run.
std::vector<Timing> run_bench(const BenchConfig& cfg, const std::function<bool(const Timing&)>& progress = {});

struct ScalingFit {
    double c = 0.0;          // geometric-mean fit of t / (L log2 L)
    double worst_ratio = 0;  // max over points of max(t/fit, fit/t)
    bool within(double factor) const { return worst_ratio <= factor; }
};

/// Fit t ≈ c L log2 L.
ScalingFit fit_nlogn(const std::vector<std::size_t>& lengths, const std::vector<double>& times);
/// Least-squares slope of log t against log L.
double loglog_slope(const std::vector<std::size_t>& lengths, const std::vector<double>& times);

/// Times of one mode, ordered like cfg.lengths.
std::vector<double> train_times(const std::vector<Timing>& t, Mode m);
/// recurrent / conv training time at the given length; throws if either is missing.
double speedup(const std::vector<Timing>& t, std::size_t length);

}  // namespace ls4::bench

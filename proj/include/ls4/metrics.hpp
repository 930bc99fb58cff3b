#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ls4/params.hpp"
#include "ls4/tensor.hpp"

namespace ls4::metrics {

struct Histogram {
    std::vector<double> edges;    // bins + 1 uniform edges
    std::vector<double> density;  // sums to 1 / bin width
    double width() const { return edges[1] - edges[0]; }
};

/// Normalized histogram on [lo, hi]; values equal to hi fall in the last bin.
Histogram histogram(std::span<const double> values, double lo, double hi, std::size_t bins);

/// Sum over shared bins of |p_real - p_gen| * width, with bins spanning the pooled range.
double marginal_distance(std::span<const double> real, std::span<const double> gen, std::size_t bins = 50);

enum class MarginalMode { per_step, pooled };

/// Sequences [S, L, C]. per_step: mean over (step, channel) of the distance at that step;
/// pooled: one distance per channel over all (step, value) pairs. `steps` restricts the time steps used.
double marginal_score(const Tensor& real, const Tensor& gen, std::size_t bins = 50,
                      MarginalMode mode = MarginalMode::per_step, const std::vector<std::size_t>& steps = {});

/// Masked mean squared error; an empty mask means every cell counts.
double mse(const Tensor& pred, const Tensor& target, const Tensor& mask = {});

/// Empirical CRPS averaged over points. ensemble: [S, P...] with target [P...].
double crps(const Tensor& ensemble, const Tensor& target);
/// CRPS of one point from its ensemble members.
double crps_point(std::vector<double> members, double y);

// ---- learned scores ----------------------------------------------------------------------

/// Linear encoder, one S4 layer (single input, HiPPO init), GELU, linear head.
struct EvalConfig {
    std::size_t width = 16;
    std::size_t state = 16;
    std::size_t epochs = 100;
    std::size_t batch_size = 128;
    std::size_t horizon = 10;
    double lr = 0.01;
};

/// Held-out cross-entropy of a real-vs-generated classifier (higher means harder to tell apart).
/// Requires equal counts; pools both sets, splits 80/20 stratified by class.
double classification_score(const Tensor& real, const Tensor& gen, const EvalConfig& cfg, std::uint64_t seed);

/// Trains a k-step forecaster on `train` and returns its MSE on `test`, averaged over every
/// prefix length that leaves a full horizon.
double prediction_score(const Tensor& test, const Tensor& train, const EvalConfig& cfg, std::uint64_t seed);

}  // namespace ls4::metrics

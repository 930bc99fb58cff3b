#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ls4/tensor.hpp"

namespace ls4::data {

/// Sequences [S, L, C] with a matching 0/1 observation mask and shared time stamps.
struct SeriesBatch {
    Tensor values;
    Tensor mask;
    std::vector<double> times;
    std::vector<std::string> ids;

    std::size_t count() const { return values.rank() ? values.dim(0) : 0; }
    std::size_t length() const { return values.rank() ? values.dim(1) : 0; }
    std::size_t channels() const { return values.rank() ? values.dim(2) : 0; }
    void validate() const;
};

/// Fully observed batch with times 0..L-1 and ids "0".."S-1".
SeriesBatch make_batch(Tensor values);
SeriesBatch select(const SeriesBatch& b, const std::vector<std::size_t>& rows);

// ---- FLAME ---------------------------------------------------------------------------

struct FlameSpec {
    int p = 3;
    std::size_t n_traj = 1000;
    double t_end = 1000.0;
    double dt_out = 1.0;
    double x0_lo = 0.005;
    double x0_hi = 0.1;
    void validate() const;
};

class SolverError : public std::runtime_error {
public:
    SolverError(std::size_t trajectory, double t, const std::string& detail);
    std::size_t trajectory() const { return trajectory_; }
    double time() const { return t_; }

private:
    std::size_t trajectory_;
    double t_;
};

/// x^2 - x^p
double flame_rhs(double x, int p);

struct SolverOptions {
    /// Bound on the step-doubling estimate of the local error.
    double tol = 1e-8;
    double max_step = 1.0;
    double min_step = 1e-12;
};

/// Backward Euler with safeguarded Newton and step doubling (the extrapolated pair is kept), adaptive
/// steps, and output on the grid 0, dt_out, ..., t_end.
std::vector<double> flame_trajectory(double x0, int p, double t_end, double dt_out, SolverOptions opts = {},
                                     std::size_t trajectory = 0);
/// Trajectories with x0 ~ U[x0_lo, x0_hi]; values [n_traj, t_end/dt_out + 1, 1].
SeriesBatch flame_generate(const FlameSpec& spec, std::uint64_t seed, SolverOptions opts = {});

/// Keeps `length` time points spread evenly over the sequence, first and last included.
SeriesBatch subsample_time(const SeriesBatch& b, std::size_t length);

// ---- runtime benchmark data ---------------------------------------------------------

struct RuntimeDataset {
    std::size_t length = 0;
    std::size_t dataset_size = 0;
    std::size_t batch_size = 0;
    std::size_t iterations() const { return dataset_size / batch_size; }
};

/// Sizes for one of the supported lengths (80, 320, 1280, 5120, 20480).
RuntimeDataset runtime_dataset_spec(std::size_t length);
/// Standard normal values [dataset_size, length, 1].
SeriesBatch synthetic_runtime_data(std::size_t length, std::uint64_t seed);

// ---- normalization ---------------------------------------------------------------------

/// Per sequence and channel over observed cells: (x - mean) / max(std, 1e-8). Unobserved cells become 0.
SeriesBatch normalize_per_sequence(const SeriesBatch& b);
/// Per sequence and channel min-max scaling to [0, 1]; constant sequences map to 0.
SeriesBatch squash_unit_interval(const SeriesBatch& b);

// ---- CSV -----------------------------------------------------------------------------

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class CsvLayout { wide, long_format, detect };

/// Wide: header t0,t1,... then one sequence per row, empty cells unobserved.
/// Long: header series_id,t,value; missing (id, t) pairs are unobserved. Single channel.
SeriesBatch load_csv(const std::string& path, CsvLayout layout = CsvLayout::detect);
SeriesBatch parse_csv(const std::string& text, CsvLayout layout = CsvLayout::detect);
std::string format_csv(const SeriesBatch& b, CsvLayout layout);
void write_csv(const std::string& path, const SeriesBatch& b, CsvLayout layout);

struct DatasetSplit {
    SeriesBatch train;
    SeriesBatch test;
    double ratio = 0.8;
};

/// Seeded shuffle, then the first round(ratio * S) sequences go to train.
DatasetSplit split_train_test(const SeriesBatch& b, double ratio, std::uint64_t seed);

}  // namespace ls4::data

#include "ls4/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace ls4::data {

void SeriesBatch::validate() const {
    if (values.rank() != 3) throw std::invalid_argument("series values must be [S, L, C]");
    require_same_shape(values, mask, "series mask");
    if (times.size() != length()) throw std::invalid_argument("series times do not match the length");
    if (ids.size() != count()) throw std::invalid_argument("series ids do not match the count");
}

SeriesBatch make_batch(Tensor values) {
    if (values.rank() != 3) throw std::invalid_argument("series values must be [S, L, C]");
    SeriesBatch b;
    b.mask = Tensor(values.shape(), 1.0);
    b.times.resize(values.dim(1));
    std::iota(b.times.begin(), b.times.end(), 0.0);
    for (std::size_t i = 0; i < values.dim(0); ++i) b.ids.push_back(std::to_string(i));
    b.values = std::move(values);
    return b;
}

SeriesBatch select(const SeriesBatch& b, const std::vector<std::size_t>& rows) {
    const std::size_t row = b.length() * b.channels();
    SeriesBatch out;
    out.values = Tensor({rows.size(), b.length(), b.channels()});
    out.mask = Tensor(out.values.shape());
    out.times = b.times;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= b.count()) throw std::out_of_range("select: row out of range");
        const auto src = static_cast<long>(rows[i] * row), dst = static_cast<long>(i * row);
        std::copy_n(b.values.storage().begin() + src, row, out.values.storage().begin() + dst);
        std::copy_n(b.mask.storage().begin() + src, row, out.mask.storage().begin() + dst);
        out.ids.push_back(b.ids[rows[i]]);
    }
    return out;
}

// ---- FLAME ---------------------------------------------------------------------------

void FlameSpec::validate() const {
    if (p < 3) throw std::invalid_argument("FLAME exponent p must be >= 3");
    if (!(t_end > 0.0) || !(dt_out > 0.0)) throw std::invalid_argument("FLAME t_end and dt_out must be positive");
    const double steps = t_end / dt_out;
    if (std::abs(steps - std::round(steps)) > 1e-9 * steps)
        throw std::invalid_argument("FLAME t_end must be a multiple of dt_out");
    if (!(x0_lo > 0.0) || !(x0_hi >= x0_lo) || !(x0_hi < 1.0))
        throw std::invalid_argument("FLAME x0 range must lie inside (0, 1)");
}

SolverError::SolverError(std::size_t trajectory, double t, const std::string& detail)
    : std::runtime_error("FLAME solver failed on trajectory " + std::to_string(trajectory) + " at t=" +
                         std::to_string(t) + ": " + detail),
      trajectory_(trajectory),
      t_(t) {}

double flame_rhs(double x, int p) { return x * x - std::pow(x, p); }

namespace {

double flame_slope(double x, int p) { return 2.0 * x - p * std::pow(x, p - 1); }

// Solves y = x + h f(y). The root is bracketed between x and the fixed point 1, so Newton steps that
// leave the bracket fall back to bisection. Returns false if the iteration cap is hit.
bool backward_euler(double x, double h, int p, double& y) {
    const double fx = flame_rhs(x, p);
    if (fx == 0.0) {
        y = x;
        return true;
    }
    auto g = [&](double v) { return v - x - h * flame_rhs(v, p); };
    double lo = std::min(x, 1.0), hi = std::max(x, 1.0);
    y = x + h * fx;
    if (y <= lo || y >= hi) y = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
        const double gy = g(y);
        if (gy == 0.0) return true;
        (gy < 0.0) == (fx > 0.0) ? lo = y : hi = y;
        double next = y - gy / (1.0 - h * flame_slope(y, p));
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (std::abs(next - y) <= 1e-15 * std::max(1.0, std::abs(y))) {
            y = next;
            return true;
        }
        y = next;
    }
    return false;
}

}  // namespace

std::vector<double> flame_trajectory(double x0, int p, double t_end, double dt_out, SolverOptions opts,
                                     std::size_t trajectory) {
    FlameSpec check;
    check.p = p;
    check.t_end = t_end;
    check.dt_out = dt_out;
    check.validate();
    const auto n_out = static_cast<std::size_t>(std::llround(t_end / dt_out)) + 1;
    std::vector<double> out(n_out);
    out[0] = x0;
    double x = x0, t = 0.0, h = std::min(opts.max_step, dt_out);
    for (std::size_t k = 1; k < n_out; ++k) {
        const double target = static_cast<double>(k) * dt_out;
        while (t < target) {
            const bool last = t + h >= target;
            const double step = last ? target - t : h;
            double full, half, two;
            if (!backward_euler(x, step, p, full) || !backward_euler(x, 0.5 * step, p, half) ||
                !backward_euler(half, 0.5 * step, p, two)) {
                h = 0.5 * step;
                if (h < opts.min_step) throw SolverError(trajectory, t, "Newton iteration did not converge");
                continue;
            }
            const double err = std::abs(two - full);
            if (err > opts.tol) {
                h = step * std::max(0.2, 0.9 * std::sqrt(opts.tol / err));
                if (h < opts.min_step) throw SolverError(trajectory, t, "step size underflow");
                continue;
            }
            // Extrapolated pair, kept between x and the fixed point where the exact solution lives.
            const double lo = std::min(x, 1.0), hi = std::max(x, 1.0);
            x = std::clamp(2.0 * two - full, lo, hi);
            t = last ? target : t + step;
            const double grow = err > 0.0 ? std::min(2.0, 0.9 * std::sqrt(opts.tol / err)) : 2.0;
            h = std::min(opts.max_step, std::max(h, step * std::max(1.0, grow)));
        }
        out[k] = x;
    }
    return out;
}

SeriesBatch flame_generate(const FlameSpec& spec, std::uint64_t seed, SolverOptions opts) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> x0(spec.x0_lo, spec.x0_hi);
    std::vector<double> starts(spec.n_traj);
    for (auto& s : starts) s = x0(rng);
    const auto L = static_cast<std::size_t>(std::llround(spec.t_end / spec.dt_out)) + 1;
    Tensor v({spec.n_traj, L, 1});
    for (std::size_t i = 0; i < spec.n_traj; ++i) {
        auto traj = flame_trajectory(starts[i], spec.p, spec.t_end, spec.dt_out, opts, i);
        std::copy(traj.begin(), traj.end(), v.storage().begin() + static_cast<long>(i * L));
    }
    SeriesBatch b = make_batch(std::move(v));
    for (std::size_t l = 0; l < L; ++l) b.times[l] = static_cast<double>(l) * spec.dt_out;
    return b;
}

SeriesBatch subsample_time(const SeriesBatch& b, std::size_t length) {
    const std::size_t L = b.length(), C = b.channels();
    if (length == 0 || length > L) throw std::invalid_argument("subsample_time: length must be in [1, L]");
    std::vector<std::size_t> keep(length);
    for (std::size_t i = 0; i < length; ++i)
        keep[i] = length == 1 ? 0 : static_cast<std::size_t>(std::llround(static_cast<double>(i * (L - 1)) / static_cast<double>(length - 1)));
    SeriesBatch out;
    out.values = Tensor({b.count(), length, C});
    out.mask = Tensor(out.values.shape());
    out.ids = b.ids;
    for (std::size_t i = 0; i < length; ++i) out.times.push_back(b.times[keep[i]]);
    for (std::size_t s = 0; s < b.count(); ++s)
        for (std::size_t i = 0; i < length; ++i)
            for (std::size_t c = 0; c < C; ++c) {
                out.values.at(s, i, c) = b.values.at(s, keep[i], c);
                out.mask.at(s, i, c) = b.mask.at(s, keep[i], c);
            }
    return out;
}

// ---- runtime data --------------------------------------------------------------------

RuntimeDataset runtime_dataset_spec(std::size_t length) {
    static const std::map<std::size_t, std::pair<std::size_t, std::size_t>> table{
        {80, {102400, 1024}}, {320, {25600, 256}}, {1280, {6400, 64}}, {5120, {1600, 16}}, {20480, {400, 4}}};
    auto it = table.find(length);
    if (it == table.end())
        throw std::invalid_argument("runtime length must be one of 80, 320, 1280, 5120, 20480; got " +
                                    std::to_string(length));
    return {length, it->second.first, it->second.second};
}

SeriesBatch synthetic_runtime_data(std::size_t length, std::uint64_t seed) {
    const RuntimeDataset spec = runtime_dataset_spec(length);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d;
    Tensor v({spec.dataset_size, length, 1});
    for (auto& x : v.storage()) x = d(rng);
    return make_batch(std::move(v));
}

// ---- normalization ---------------------------------------------------------------------

namespace {

template <class F>
SeriesBatch per_sequence(const SeriesBatch& b, F transform) {
    b.validate();
    SeriesBatch out = b;
    const std::size_t L = b.length(), C = b.channels();
    std::vector<double> vals;
    for (std::size_t s = 0; s < b.count(); ++s)
        for (std::size_t c = 0; c < C; ++c) {
            vals.clear();
            for (std::size_t l = 0; l < L; ++l)
                if (b.mask.at(s, l, c) != 0.0) vals.push_back(b.values.at(s, l, c));
            auto fn = transform(vals);
            for (std::size_t l = 0; l < L; ++l)
                out.values.at(s, l, c) = b.mask.at(s, l, c) != 0.0 ? fn(b.values.at(s, l, c)) : 0.0;
        }
    return out;
}

}  // namespace

SeriesBatch normalize_per_sequence(const SeriesBatch& b) {
    return per_sequence(b, [](const std::vector<double>& v) {
        double mean = 0.0, var = 0.0;
        for (double x : v) mean += x;
        if (!v.empty()) mean /= static_cast<double>(v.size());
        for (double x : v) var += (x - mean) * (x - mean);
        if (!v.empty()) var /= static_cast<double>(v.size());
        const double sd = std::max(std::sqrt(var), 1e-8);
        return [mean, sd](double x) { return (x - mean) / sd; };
    });
}

SeriesBatch squash_unit_interval(const SeriesBatch& b) {
    return per_sequence(b, [](const std::vector<double>& v) {
        double lo = 0.0, hi = 0.0;
        if (!v.empty()) {
            auto [a, z] = std::minmax_element(v.begin(), v.end());
            lo = *a;
            hi = *z;
        }
        const double range = hi - lo;
        return [lo, range](double x) { return range > 1e-8 ? (x - lo) / range : 0.0; };
    });
}

// ---- CSV ------------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string_view::npos) return {};
    const auto z = s.find_last_not_of(" \t\r");
    return std::string(s.substr(a, z - a + 1));
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

bool parse_number(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && ptr == end;
}

double number_or_throw(const std::string& s, std::size_t line, const char* what) {
    double v;
    if (!parse_number(s, v))
        throw ParseError("line " + std::to_string(line) + ": non-numeric " + what + " '" + s + "'");
    return v;
}

std::string fmt(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

std::vector<std::string> data_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
    if (lines.empty()) throw ParseError("empty CSV input");
    return lines;
}

SeriesBatch parse_wide(const std::vector<std::string>& lines) {
    const auto header = split_fields(lines[0]);
    const std::size_t L = header.size();
    if (lines.size() < 2) throw ParseError("CSV has a header but no sequences");
    std::vector<double> times(L);
    for (std::size_t l = 0; l < L; ++l) {
        double t;
        times[l] = header[l].size() > 1 && header[l][0] == 't' && parse_number(header[l].substr(1), t)
                       ? t
                       : static_cast<double>(l);
    }
    const std::size_t S = lines.size() - 1;
    SeriesBatch b = make_batch(Tensor({S, L, 1}));
    b.times = times;
    for (std::size_t s = 0; s < S; ++s) {
        const auto cells = split_fields(lines[s + 1]);
        if (cells.size() != L)
            throw ParseError("line " + std::to_string(s + 2) + ": expected " + std::to_string(L) + " cells, found " +
                             std::to_string(cells.size()));
        for (std::size_t l = 0; l < L; ++l) {
            if (cells[l].empty()) {
                b.mask.at(s, l, 0) = 0.0;
                continue;
            }
            b.values.at(s, l, 0) = number_or_throw(cells[l], s + 2, "cell");
        }
    }
    return b;
}

SeriesBatch parse_long(const std::vector<std::string>& lines) {
    std::vector<std::string> ids;
    std::map<std::string, std::size_t> id_index;
    std::vector<double> time_set;
    struct Cell {
        std::size_t id;
        double t;
        double v;
    };
    std::vector<Cell> cells;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        const auto f = split_fields(lines[i]);
        if (f.size() != 3) throw ParseError("line " + std::to_string(i + 1) + ": expected series_id,t,value");
        auto [it, fresh] = id_index.try_emplace(f[0], ids.size());
        if (fresh) ids.push_back(f[0]);
        const double t = number_or_throw(f[1], i + 1, "time");
        cells.push_back({it->second, t, number_or_throw(f[2], i + 1, "value")});
        time_set.push_back(t);
    }
    if (cells.empty()) throw ParseError("CSV has a header but no observations");
    std::sort(time_set.begin(), time_set.end());
    time_set.erase(std::unique(time_set.begin(), time_set.end()), time_set.end());
    SeriesBatch b;
    b.values = Tensor({ids.size(), time_set.size(), 1});
    b.mask = Tensor(b.values.shape());
    b.times = time_set;
    b.ids = ids;
    for (const Cell& c : cells) {
        const auto l = static_cast<std::size_t>(std::lower_bound(time_set.begin(), time_set.end(), c.t) - time_set.begin());
        if (b.mask.at(c.id, l, 0) != 0.0)
            throw ParseError("duplicate observation for series '" + ids[c.id] + "' at t=" + fmt(c.t));
        b.values.at(c.id, l, 0) = c.v;
        b.mask.at(c.id, l, 0) = 1.0;
    }
    return b;
}

}  // namespace

SeriesBatch parse_csv(const std::string& text, CsvLayout layout) {
    const auto lines = data_lines(text);
    if (layout == CsvLayout::detect) {
        const auto head = split_fields(lines[0]);
        layout = !head.empty() && head[0] == "series_id" ? CsvLayout::long_format : CsvLayout::wide;
    }
    return layout == CsvLayout::wide ? parse_wide(lines) : parse_long(lines);
}

SeriesBatch load_csv(const std::string& path, CsvLayout layout) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_csv(ss.str(), layout);
}

std::string format_csv(const SeriesBatch& b, CsvLayout layout) {
    b.validate();
    if (b.channels() != 1) throw std::invalid_argument("CSV output supports a single channel");
    std::string out;
    if (layout == CsvLayout::long_format) {
        out = "series_id,t,value\n";
        for (std::size_t s = 0; s < b.count(); ++s)
            for (std::size_t l = 0; l < b.length(); ++l)
                if (b.mask.at(s, l, 0) != 0.0) out += b.ids[s] + "," + fmt(b.times[l]) + "," + fmt(b.values.at(s, l, 0)) + "\n";
        return out;
    }
    for (std::size_t l = 0; l < b.length(); ++l) out += (l ? ",t" : "t") + fmt(b.times[l]);
    out += "\n";
    for (std::size_t s = 0; s < b.count(); ++s) {
        for (std::size_t l = 0; l < b.length(); ++l) {
            if (l) out += ",";
            if (b.mask.at(s, l, 0) != 0.0) out += fmt(b.values.at(s, l, 0));
        }
        out += "\n";
    }
    return out;
}

void write_csv(const std::string& path, const SeriesBatch& b, CsvLayout layout) {
    const std::string text = format_csv(b, layout);
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
    if (!f) throw std::runtime_error("write failed: " + path);
}

DatasetSplit split_train_test(const SeriesBatch& b, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split ratio must be in (0, 1)");
    std::vector<std::size_t> order(b.count());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(b.count())));
    std::vector<std::size_t> tr(order.begin(), order.begin() + static_cast<long>(n_train));
    std::vector<std::size_t> te(order.begin() + static_cast<long>(n_train), order.end());
    return {select(b, tr), select(b, te), ratio};
}

}  // namespace ls4::data

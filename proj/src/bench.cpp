#include "ls4/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>

#include "ls4/autodiff.hpp"
#include "ls4/ssm.hpp"

namespace ls4::bench {

std::string mode_name(Mode m) { return m == Mode::conv ? "conv" : "recurrent"; }

Mode parse_mode(const std::string& s) {
    if (s == "conv") return Mode::conv;
    if (s == "recurrent") return Mode::recurrent;
    throw std::invalid_argument("unknown bench mode '" + s + "'");
}

void BenchConfig::validate() const {
    if (lengths.empty() || modes.empty()) throw std::invalid_argument("bench: need at least one length and mode");
    for (auto L : lengths)
        if (L < 2) throw std::invalid_argument("bench: lengths must be at least 2");
    if (batch == 0 || heads == 0 || state == 0 || iterations == 0 || inference_repeats == 0)
        throw std::invalid_argument("bench: sizes and iteration counts must be positive");
    if (!(delta > 0.0)) throw std::invalid_argument("bench: delta must be positive");
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor uniform(Shape shape, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = u(rng);
    return t;
}

struct Problem {
    Tensor u, probe, Abar, bbar, c, D;
};

Problem make_problem(const BenchConfig& cfg, std::size_t L) {
    std::mt19937_64 rng(cfg.seed * 1000003ULL + L);
    Problem p;
    Tensor A = ssm::hippo_bank(cfg.heads, cfg.state);
    Tensor B(Shape{cfg.heads, cfg.state});
    for (std::size_t h = 0; h < cfg.heads; ++h)
        for (std::size_t i = 0; i < cfg.state; ++i) B.at(h, i) = std::sqrt(2.0 * static_cast<double>(i) + 1.0);
    p.Abar = ssm::bilinear_transition_value(A, cfg.delta);
    p.bbar = ssm::bilinear_input_value(A, B, cfg.delta);
    p.c = uniform(Shape{cfg.heads, cfg.state}, rng);
    p.D = uniform(Shape{cfg.heads}, rng);
    p.u = uniform(Shape{cfg.batch, L, cfg.heads}, rng);
    p.probe = uniform(Shape{cfg.batch, L, cfg.heads}, rng);
    return p;
}

ad::Var layer(Mode m, ad::Var u, ad::Var Abar, ad::Var bbar, ad::Var c, ad::Var D) {
    const std::size_t L = u.shape()[1];
    ad::Var y = m == Mode::conv ? ad::causal_conv_bank(u, ssm::kernel_bank(c, Abar, bbar, L))
                                : ssm::scan_bank(u, Abar, bbar, c);
    return ad::add(y, ad::mul_last(u, D));
}

double train_iteration(Mode m, const Problem& p) {
    ad::Tape t;
    ad::Var u = t.constant(p.u);
    ad::Var Abar = t.leaf(p.Abar), bbar = t.leaf(p.bbar), c = t.leaf(p.c), D = t.leaf(p.D);
    ad::Var loss = ad::sum(ad::mul(layer(m, u, Abar, bbar, c, D), t.constant(p.probe)));
    t.backward(loss);
    return loss.value().item();
}

Tensor infer(Mode m, const Problem& p) {
    const std::size_t L = p.u.dim(1);
    Tensor y = m == Mode::conv ? ad::causal_conv_bank_value(p.u, ssm::kernel_bank_value(p.c, p.Abar, p.bbar, L))
                               : ssm::scan_bank_value(p.u, p.Abar, p.bbar, p.c);
    const std::size_t H = p.u.dim(2);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += p.D[i % H] * p.u[i];
    return y;
}

}  // namespace

std::vector<Timing> run_bench(const BenchConfig& cfg, const std::function<bool(const Timing&)>& progress) {
    cfg.validate();
    std::vector<Timing> out;
    for (std::size_t L : cfg.lengths) {
        const Problem p = make_problem(cfg, L);
        for (Mode m : cfg.modes) {
            Timing rec;
            rec.length = L;
            rec.mode = m;
            rec.iterations = cfg.iterations;
            rec.loss = train_iteration(m, p);  // warm-up
            std::vector<double> train, inference;
            for (std::size_t it = 0; it < cfg.iterations; ++it) {
                const auto t0 = Clock::now();
                train_iteration(m, p);
                train.push_back(ms_since(t0));
            }
            infer(m, p);
            for (std::size_t it = 0; it < cfg.inference_repeats; ++it) {
                const auto t0 = Clock::now();
                Tensor y = infer(m, p);
                inference.push_back(ms_since(t0));
            }
            rec.train_ms = median(train);
            rec.infer_ms = median(inference);
            out.push_back(rec);
            if (progress && !progress(rec)) return out;
        }
    }
    return out;
}

ScalingFit fit_nlogn(const std::vector<std::size_t>& lengths, const std::vector<double>& times) {
    if (lengths.size() != times.size() || lengths.empty()) throw std::invalid_argument("fit_nlogn: size mismatch");
    std::vector<double> r;
    double log_sum = 0.0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        const double L = static_cast<double>(lengths[i]);
        if (!(times[i] > 0.0) || L < 2.0) throw std::invalid_argument("fit_nlogn: need positive times and L >= 2");
        r.push_back(times[i] / (L * std::log2(L)));
        log_sum += std::log(r.back());
    }
    ScalingFit f;
    f.c = std::exp(log_sum / static_cast<double>(r.size()));
    for (double x : r) f.worst_ratio = std::max({f.worst_ratio, x / f.c, f.c / x});
    return f;
}

double loglog_slope(const std::vector<std::size_t>& lengths, const std::vector<double>& times) {
    if (lengths.size() != times.size() || lengths.size() < 2) throw std::invalid_argument("loglog_slope: need 2+ points");
    const double n = static_cast<double>(lengths.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        const double x = std::log(static_cast<double>(lengths[i])), y = std::log(times[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::vector<double> train_times(const std::vector<Timing>& t, Mode m) {
    std::vector<double> out;
    for (const auto& r : t)
        if (r.mode == m) out.push_back(r.train_ms);
    return out;
}

double speedup(const std::vector<Timing>& t, std::size_t length) {
    double conv = -1, rec = -1;
    for (const auto& r : t)
        if (r.length == length) (r.mode == Mode::conv ? conv : rec) = r.train_ms;
    if (conv <= 0 || rec <= 0) throw std::invalid_argument("speedup: missing timing for length");
    return rec / conv;
}

}  // namespace ls4::bench

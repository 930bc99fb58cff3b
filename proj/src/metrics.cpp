#include "ls4/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "ls4/ls4net.hpp"
#include "ls4/vae.hpp"

namespace ls4::metrics {

Histogram histogram(std::span<const double> values, double lo, double hi, std::size_t bins) {
    if (bins == 0 || !(hi > lo)) throw std::invalid_argument("histogram needs bins > 0 and hi > lo");
    if (values.empty()) throw std::invalid_argument("histogram of an empty sample");
    Histogram h;
    const double w = (hi - lo) / static_cast<double>(bins);
    for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(lo + w * static_cast<double>(i));
    h.density.assign(bins, 0.0);
    const double unit = 1.0 / (static_cast<double>(values.size()) * w);
    for (double v : values) {
        if (v < lo || v > hi) throw std::invalid_argument("histogram value outside its range");
        auto b = static_cast<std::size_t>((v - lo) / w);
        h.density[std::min(b, bins - 1)] += unit;
    }
    return h;
}

double marginal_distance(std::span<const double> real, std::span<const double> gen, std::size_t bins) {
    if (real.empty() || gen.empty()) throw std::invalid_argument("marginal score of an empty sample");
    auto [rlo, rhi] = std::minmax_element(real.begin(), real.end());
    auto [glo, ghi] = std::minmax_element(gen.begin(), gen.end());
    double lo = std::min(*rlo, *glo), hi = std::max(*rhi, *ghi);
    if (!(hi > lo)) hi = lo + 1.0;
    const Histogram a = histogram(real, lo, hi, bins), b = histogram(gen, lo, hi, bins);
    double s = 0.0;
    for (std::size_t i = 0; i < bins; ++i) s += std::abs(a.density[i] - b.density[i]);
    return s * a.width();
}

double marginal_score(const Tensor& real, const Tensor& gen, std::size_t bins, MarginalMode mode,
                      const std::vector<std::size_t>& steps) {
    if (real.rank() != 3 || gen.rank() != 3 || real.dim(1) != gen.dim(1) || real.dim(2) != gen.dim(2))
        throw std::invalid_argument("marginal score needs [S, L, C] inputs of equal length and channels");
    if (real.dim(0) == 0 || gen.dim(0) == 0) throw std::invalid_argument("marginal score of an empty batch");
    std::vector<std::size_t> use = steps;
    if (use.empty()) {
        use.resize(real.dim(1));
        std::iota(use.begin(), use.end(), 0);
    }
    for (std::size_t l : use)
        if (l >= real.dim(1)) throw std::invalid_argument("marginal score step out of range");
    auto column = [&](const Tensor& t, std::size_t c, std::span<const std::size_t> ls) {
        std::vector<double> v;
        for (std::size_t s = 0; s < t.dim(0); ++s)
            for (std::size_t l : ls) v.push_back(t.at(s, l, c));
        return v;
    };
    double total = 0.0;
    std::size_t terms = 0;
    for (std::size_t c = 0; c < real.dim(2); ++c) {
        if (mode == MarginalMode::pooled) {
            total += marginal_distance(column(real, c, use), column(gen, c, use), bins);
            ++terms;
            continue;
        }
        for (std::size_t l : use) {
            total += marginal_distance(column(real, c, {&l, 1}), column(gen, c, {&l, 1}), bins);
            ++terms;
        }
    }
    return total / static_cast<double>(terms);
}

double mse(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    require_same_shape(pred, target, "mse");
    if (!mask.empty()) require_same_shape(pred, mask, "mse mask");
    double s = 0.0, n = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double m = mask.empty() ? 1.0 : mask[i];
        if (m == 0.0) continue;
        const double d = pred[i] - target[i];
        s += m * d * d;
        n += m;
    }
    if (n == 0.0) throw std::invalid_argument("mse: no observed cells");
    return s / n;
}

double crps_point(std::vector<double> x, double y) {
    if (x.empty()) throw std::invalid_argument("crps: empty ensemble");
    const auto S = static_cast<double>(x.size());
    double abs_err = 0.0;
    for (double v : x) abs_err += std::abs(v - y);
    // Sum over ordered pairs of |x_i - x_j| from the sorted sample.
    std::sort(x.begin(), x.end());
    double pair = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) pair += (2.0 * static_cast<double>(i) - S + 1.0) * x[i];
    return abs_err / S - pair / (S * S);
}

double crps(const Tensor& ensemble, const Tensor& target) {
    if (ensemble.rank() != target.rank() + 1 || ensemble.size() != ensemble.dim(0) * target.size())
        throw std::invalid_argument("crps: ensemble must be [S, target shape...]");
    if (target.size() == 0) throw std::invalid_argument("crps: no points");
    const std::size_t S = ensemble.dim(0), P = target.size();
    double total = 0.0;
    std::vector<double> members(S);
    for (std::size_t p = 0; p < P; ++p) {
        for (std::size_t s = 0; s < S; ++s) members[s] = ensemble[s * P + p];
        total += crps_point(members, target[p]);
    }
    return total / static_cast<double>(P);
}

// ---- evaluator ---------------------------------------------------------------------------

namespace {

ParamStore init_evaluator(std::size_t in, std::size_t out, const EvalConfig& cfg, std::uint64_t seed) {
    net::Rng rng(seed);
    ParamStore s, layer;
    net::init_linear(s, "enc", in, cfg.width, rng);
    net::init_inf_block(layer, "s4", cfg.width, cfg.state, rng);
    for (const char* n : {"s4.A5", "s4.B5", "s4.C", "s4.D"}) s.add(n, layer.get(n));
    net::init_linear(s, "head", cfg.width, out, rng);
    return s;
}

ad::Var evaluator_features(BoundParams& p, const Tensor& x) {
    ad::Var u = ad::linear(p.tape().constant(x), p("enc.W"), p("enc.b"));
    return net::inf_layer_forward(p, "s4", u);
}

Tensor rows(const Tensor& t, std::span<const std::size_t> idx) {
    Shape s = t.shape();
    const std::size_t row = t.size() / s[0];
    s[0] = idx.size();
    Tensor out(s);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(t.storage().begin() + static_cast<long>(idx[i] * row), row,
                    out.storage().begin() + static_cast<long>(i * row));
    return out;
}

// Minibatch AdamW on loss(params, rows); deterministic given the seed.
template <class Loss>
ParamStore fit(ParamStore params, std::size_t count, const EvalConfig& cfg, std::uint64_t seed, Loss loss) {
    vae::AdamWConfig opt;
    opt.lr = cfg.lr;
    opt.clip_norm = 0.0;
    vae::OptimizerState st = vae::init_optimizer(params);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < count; b += cfg.batch_size) {
            std::span<const std::size_t> idx(order.data() + b, std::min(cfg.batch_size, count - b));
            ad::Tape t;
            BoundParams bp(t, params, true);
            t.backward(loss(bp, idx));
            adamw_step(params, bp.gradients(), st, opt);
        }
    }
    return params;
}

void check_series(const Tensor& t, const char* what) {
    if (t.rank() != 3 || t.dim(0) == 0 || t.dim(1) == 0)
        throw std::invalid_argument(std::string(what) + " must be a nonempty [S, L, C] tensor");
}

// Mean binary cross-entropy from logits: softplus(z) - y z.
ad::Var bce(ad::Var logit, const Tensor& labels) {
    ad::Tape& t = logit.tape();
    return ad::mean(ad::sub(ad::softplus(logit), ad::mul(logit, t.constant(labels))));
}

// Targets x[n+1..n+k] with a mask marking the positions that have all k of them: [S, L, k*C].
std::pair<Tensor, Tensor> forecast_targets(const Tensor& x, std::size_t k) {
    const std::size_t S = x.dim(0), L = x.dim(1), C = x.dim(2);
    Tensor target({S, L, k * C}), mask({S, L, k * C});
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t n = 0; n + k < L; ++n)
            for (std::size_t j = 1; j <= k; ++j)
                for (std::size_t c = 0; c < C; ++c) {
                    target.at(s, n, (j - 1) * C + c) = x.at(s, n + j, c);
                    mask.at(s, n, (j - 1) * C + c) = 1.0;
                }
    return {target, mask};
}

}  // namespace

double classification_score(const Tensor& real, const Tensor& gen, const EvalConfig& cfg, std::uint64_t seed) {
    check_series(real, "real");
    check_series(gen, "generated");
    if (real.shape() != gen.shape())
        throw std::invalid_argument("classification score needs equally many real and generated sequences of equal shape");
    const std::size_t n = real.dim(0);
    if (n < 5) throw std::invalid_argument("classification score needs at least 5 sequences per class");
    // Stratified 80/20 split per class.
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> pr(n), pg(n);
    std::iota(pr.begin(), pr.end(), 0);
    std::iota(pg.begin(), pg.end(), 0);
    std::shuffle(pr.begin(), pr.end(), rng);
    std::shuffle(pg.begin(), pg.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
    auto pool = [&](std::size_t from, std::size_t to) {
        const std::size_t m = to - from, row = real.size() / n;
        Tensor x({2 * m, real.dim(1), real.dim(2)}), y({2 * m, 1});
        for (std::size_t i = 0; i < m; ++i) {
            std::copy_n(real.storage().begin() + static_cast<long>(pr[from + i] * row), row,
                        x.storage().begin() + static_cast<long>(i * row));
            std::copy_n(gen.storage().begin() + static_cast<long>(pg[from + i] * row), row,
                        x.storage().begin() + static_cast<long>((m + i) * row));
            y[i] = 1.0;
        }
        return std::make_pair(x, y);
    };
    auto [xtr, ytr] = pool(0, n_train);
    auto [xte, yte] = pool(n_train, n);
    ParamStore params = init_evaluator(real.dim(2), 1, cfg, seed + 1);
    auto logits = [](BoundParams& p, const Tensor& x) {
        return ad::linear(ad::mean_time(evaluator_features(p, x)), p("head.W"), p("head.b"));
    };
    params = fit(params, xtr.dim(0), cfg, seed + 2, [&](BoundParams& p, std::span<const std::size_t> idx) {
        return bce(logits(p, rows(xtr, idx)), rows(ytr, idx));
    });
    ad::Tape t;
    BoundParams p(t, params, false);
    return bce(logits(p, xte), yte).value().item();
}

double prediction_score(const Tensor& test, const Tensor& train, const EvalConfig& cfg, std::uint64_t seed) {
    check_series(test, "test");
    check_series(train, "train");
    if (test.dim(2) != train.dim(2)) throw std::invalid_argument("prediction score: channel mismatch");
    if (cfg.horizon == 0 || test.dim(1) <= cfg.horizon || train.dim(1) <= cfg.horizon)
        throw std::invalid_argument("prediction score: sequences must be longer than the horizon");
    const std::size_t C = train.dim(2);
    auto [ytr, mtr] = forecast_targets(train, cfg.horizon);
    auto predict = [](BoundParams& p, const Tensor& x) {
        return ad::linear(evaluator_features(p, x), p("head.W"), p("head.b"));
    };
    ParamStore params = init_evaluator(C, cfg.horizon * C, cfg, seed + 1);
    params = fit(params, train.dim(0), cfg, seed + 2, [&](BoundParams& p, std::span<const std::size_t> idx) {
        const Tensor m = rows(mtr, idx);
        double count = 0.0;
        for (double v : m.data()) count += v;
        ad::Tape& t = p.tape();
        ad::Var err = ad::sub(predict(p, rows(train, idx)), t.constant(rows(ytr, idx)));
        return ad::scale(ad::sum(ad::mul(ad::square(err), t.constant(m))), 1.0 / count);
    });
    auto [yte, mte] = forecast_targets(test, cfg.horizon);
    ad::Tape t;
    BoundParams p(t, params, false);
    return mse(predict(p, test).value(), yte, mte);
}

}  // namespace ls4::metrics

#include "ls4/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ls4::vae {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

Shape drop_last(const Shape& s) {
    if (s.empty()) throw std::invalid_argument("density inputs need a trailing axis");
    return Shape(s.begin(), s.end() - 1);
}

void require_positive(const Tensor& sigma, const char* what) {
    for (double v : sigma.data())
        if (!(v > 0.0)) throw std::invalid_argument(std::string(what) + ": sigma must be positive");
}

void require_mask(const Tensor& mask, const Shape& shape, const char* what) {
    if (!mask.empty() && mask.shape() != shape)
        throw std::invalid_argument(std::string(what) + ": mask shape " + shape_string(mask.shape()) +
                                    " does not match " + shape_string(shape));
}

double mask_at(const Tensor& mask, std::size_t i) { return mask.empty() ? 1.0 : mask[i]; }

// Zero at unobserved cells, so missing values (possibly NaN) never reach the model.
Tensor observed_values(const Tensor& x, const Tensor& mask) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = mask[i] != 0.0 ? x[i] : 0.0;
    return out;
}

Tensor ones_mask(const Tensor& x, const Tensor& mask) {
    if (mask.empty()) return Tensor(x.shape(), 1.0);
    require_mask(mask, x.shape(), "mask");
    return mask;
}

void check_batch(const ModelConfig& cfg, const Tensor& x) {
    if (x.rank() != 3 || x.dim(2) != cfg.x_dim)
        throw std::invalid_argument("expected observations [B, L, " + std::to_string(cfg.x_dim) + "], got " +
                                    shape_string(x.shape()));
}

// Copies rows idx of a [S, ...] tensor.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
    Shape s = t.shape();
    const std::size_t row = t.size() / s[0];
    s[0] = idx.size();
    Tensor out(s);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(t.storage().begin() + static_cast<long>(idx[i] * row), row,
                    out.storage().begin() + static_cast<long>(i * row));
    return out;
}

// Row n of a [B, L, d] tensor as [B, d].
Tensor time_slice(const Tensor& t, std::size_t n) {
    Tensor out({t.dim(0), t.dim(2)});
    for (std::size_t b = 0; b < t.dim(0); ++b)
        for (std::size_t c = 0; c < t.dim(2); ++c) out.at(b, c) = t.at(b, n, c);
    return out;
}

void put_slice(Tensor& t, std::size_t n, const Tensor& v, std::size_t offset = 0) {
    for (std::size_t b = 0; b < v.dim(0); ++b)
        for (std::size_t c = 0; c < v.dim(1); ++c) t[offset + (b * t.dim(1) + n) * t.dim(2) + c] = v.at(b, c);
}

Tensor add_noise(const Tensor& mu, const Tensor* sigma, double sigma_scalar, std::mt19937_64& rng) {
    Tensor eps = standard_normal(mu.shape(), rng);
    Tensor out = mu;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += (sigma ? (*sigma)[i] : sigma_scalar) * eps[i];
    return out;
}

struct Posterior {
    Tensor mu;
    Tensor sigma;
    Tensor x_filled;
};

Posterior posterior(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask) {
    check_batch(cfg, x);
    const Tensor m = ones_mask(x, mask);
    ad::Tape t;
    BoundParams b(t, params, false);
    Tensor filled = observed_values(x, m);
    auto q = net::inf_model_forward(b, cfg, t.constant(filled), t.constant(m));
    return {q.mu.value(), q.sigma.value(), std::move(filled)};
}

Tensor decode_mean(const ParamStore& params, const ModelConfig& cfg, const Tensor& z, const Tensor& x_filled) {
    ad::Tape t;
    BoundParams b(t, params, false);
    return net::gen_model_forward(b, cfg, t.constant(z), cfg.decoder_uses_x ? t.constant(x_filled) : ad::Var())
        .value();
}

}  // namespace

// ---- densities ----------------------------------------------------------------------

ad::Var gauss_log_prob(ad::Var x, ad::Var mu, ad::Var sigma, const Tensor& mask) {
    const Tensor& xv = x.value();
    require_same_shape(xv, mu.value(), "gauss_log_prob");
    require_same_shape(xv, sigma.value(), "gauss_log_prob");
    require_mask(mask, xv.shape(), "gauss_log_prob");
    require_positive(sigma.value(), "gauss_log_prob");
    const std::size_t d = xv.shape().back();
    Tensor out(drop_last(xv.shape()));
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double m = mask_at(mask, i);
        if (m == 0.0) continue;
        const double s = sigma.value()[i];
        const double r = (xv[i] - mu.value()[i]) / s;
        out[i / d] += m * (-0.5 * r * r - std::log(s) - kHalfLog2Pi);
    }
    return x.tape().record(std::move(out), {x, mu, sigma}, [mask, d](ad::BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& xv = ctx.input(0);
        const Tensor& mv = ctx.input(1);
        const Tensor& sv = ctx.input(2);
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double w = mask_at(mask, i) * g[i / d];
            if (w == 0.0) continue;
            const double s = sv[i], diff = xv[i] - mv[i];
            const double dmu = w * diff / (s * s);
            if (ctx.wants(0)) ctx.grad_input(0)[i] -= dmu;
            if (ctx.wants(1)) ctx.grad_input(1)[i] += dmu;
            if (ctx.wants(2)) ctx.grad_input(2)[i] += w * (diff * diff / (s * s * s) - 1.0 / s);
        }
    });
}

ad::Var gauss_log_prob(ad::Var x, ad::Var mu, double sigma, const Tensor& mask) {
    return gauss_log_prob(x, mu, x.tape().constant(Tensor(x.shape(), sigma)), mask);
}

ad::Var kl_diag_gauss(ad::Var mu_q, ad::Var sigma_q, ad::Var mu_p, ad::Var sigma_p, const Tensor& step_mask) {
    const Tensor& mq = mu_q.value();
    for (ad::Var v : {sigma_q, mu_p, sigma_p}) require_same_shape(mq, v.value(), "kl_diag_gauss");
    require_positive(sigma_q.value(), "kl_diag_gauss");
    require_positive(sigma_p.value(), "kl_diag_gauss");
    Tensor out(drop_last(mq.shape()));
    require_mask(step_mask, out.shape(), "kl_diag_gauss");
    const std::size_t d = mq.shape().back();
    for (std::size_t i = 0; i < mq.size(); ++i) {
        const double m = mask_at(step_mask, i / d);
        if (m == 0.0) continue;
        const double sq = sigma_q.value()[i], sp = sigma_p.value()[i], diff = mq[i] - mu_p.value()[i];
        out[i / d] += m * (std::log(sp / sq) + (sq * sq + diff * diff) / (2.0 * sp * sp) - 0.5);
    }
    return mu_q.tape().record(std::move(out), {mu_q, sigma_q, mu_p, sigma_p}, [step_mask, d](ad::BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& mq = ctx.input(0);
        const Tensor& sq = ctx.input(1);
        const Tensor& mp = ctx.input(2);
        const Tensor& sp = ctx.input(3);
        for (std::size_t i = 0; i < mq.size(); ++i) {
            const double w = mask_at(step_mask, i / d) * g[i / d];
            if (w == 0.0) continue;
            const double diff = mq[i] - mp[i], sp2 = sp[i] * sp[i];
            if (ctx.wants(0)) ctx.grad_input(0)[i] += w * diff / sp2;
            if (ctx.wants(1)) ctx.grad_input(1)[i] += w * (sq[i] / sp2 - 1.0 / sq[i]);
            if (ctx.wants(2)) ctx.grad_input(2)[i] -= w * diff / sp2;
            if (ctx.wants(3)) ctx.grad_input(3)[i] += w * (1.0 / sp[i] - (sq[i] * sq[i] + diff * diff) / (sp2 * sp[i]));
        }
    });
}

ad::Var reparam_sample(ad::Var mu, ad::Var sigma, const Tensor& eps) {
    return ad::add(mu, ad::mul(sigma, mu.tape().constant(eps)));
}

Tensor standard_normal(const Shape& shape, std::mt19937_64& rng) {
    std::normal_distribution<double> dist;
    Tensor t(shape);
    for (auto& v : t.storage()) v = dist(rng);
    return t;
}

// ---- bounds -------------------------------------------------------------------------

ElboTerms elbo_terms(BoundParams& p, const ModelConfig& cfg, const Tensor& x, const Tensor& mask, const Tensor& eps,
                     KlEstimator kl) {
    check_batch(cfg, x);
    const Tensor m = ones_mask(x, mask);
    const Shape zshape{x.dim(0), x.dim(1), cfg.latent_dim};
    if (eps.shape() != zshape)
        throw std::invalid_argument("elbo: noise shape " + shape_string(eps.shape()) + ", expected " +
                                    shape_string(zshape));
    ad::Tape& t = p.tape();
    ad::Var xv = t.constant(observed_values(x, m));
    auto q = net::inf_model_forward(p, cfg, xv, t.constant(m));
    ad::Var z = reparam_sample(q.mu, q.sigma, eps);
    auto prior = net::prior_model_forward(p, cfg, z);
    ad::Var mu_x = net::gen_model_forward(p, cfg, z, cfg.decoder_uses_x ? xv : ad::Var());
    ad::Var lp = gauss_log_prob(xv, mu_x, cfg.sigma_x, m);
    ad::Var klv = kl == KlEstimator::closed_form
                      ? kl_diag_gauss(q.mu, q.sigma, prior.mu, prior.sigma)
                      : ad::sub(gauss_log_prob(z, q.mu, q.sigma), gauss_log_prob(z, prior.mu, prior.sigma));
    const double inv_b = 1.0 / static_cast<double>(x.dim(0));
    ad::Var recon = ad::scale(ad::sum(lp), inv_b);
    ad::Var klsum = ad::scale(ad::sum(klv), inv_b);
    return {recon, klsum, ad::sub(recon, klsum)};
}

ElboReport elbo(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask,
                const Tensor& eps, KlEstimator kl) {
    ad::Tape t;
    BoundParams b(t, params, false);
    auto terms = elbo_terms(b, cfg, x, mask, eps, kl);
    return {terms.recon.value().item(), terms.kl.value().item(), terms.elbo.value().item()};
}

double iwae_bound(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask,
                  const std::vector<Tensor>& eps) {
    if (eps.empty()) throw std::invalid_argument("iwae_bound: need at least one particle");
    check_batch(cfg, x);
    const Tensor m = ones_mask(x, mask);
    const std::size_t B = x.dim(0);
    std::vector<std::vector<double>> logw(B);
    for (const Tensor& e : eps) {
        ad::Tape t;
        BoundParams b(t, params, false);
        ad::Var xv = t.constant(observed_values(x, m));
        auto q = net::inf_model_forward(b, cfg, xv, t.constant(m));
        ad::Var z = reparam_sample(q.mu, q.sigma, e);
        auto prior = net::prior_model_forward(b, cfg, z);
        ad::Var mu_x = net::gen_model_forward(b, cfg, z, cfg.decoder_uses_x ? xv : ad::Var());
        const Tensor lp = gauss_log_prob(xv, mu_x, cfg.sigma_x, m).value();
        const Tensor lq = gauss_log_prob(z, q.mu, q.sigma).value();
        const Tensor lpz = gauss_log_prob(z, prior.mu, prior.sigma).value();
        const std::size_t L = lp.dim(1);
        for (std::size_t i = 0; i < B; ++i) {
            double w = 0.0;
            for (std::size_t n = 0; n < L; ++n) w += lp.at(i, n) - (lq.at(i, n) - lpz.at(i, n));
            logw[i].push_back(w);
        }
    }
    double total = 0.0;
    for (const auto& w : logw) {
        const double top = *std::max_element(w.begin(), w.end());
        double s = 0.0;
        for (double v : w) s += std::exp(v - top);
        total += top + std::log(s / static_cast<double>(w.size()));
    }
    return total / static_cast<double>(B);
}

double iwae_bound(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask,
                  std::size_t particles, std::uint64_t seed) {
    check_batch(cfg, x);
    std::mt19937_64 rng(seed);
    std::vector<Tensor> eps;
    for (std::size_t k = 0; k < particles; ++k) eps.push_back(standard_normal({x.dim(0), x.dim(1), cfg.latent_dim}, rng));
    return iwae_bound(params, cfg, x, mask, eps);
}

// ---- optimization ---------------------------------------------------------------------

OptimizerState init_optimizer(const ParamStore& params) {
    return {params.zeros_like(), params.zeros_like(), params, 0};
}

double clip_global_norm(ParamStore& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads.entries())
        for (double v : g.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& [name, g] : grads.entries())
            for (double& v : g.storage()) v *= f;
    }
    return norm;
}

void adamw_step(ParamStore& params, const ParamStore& grads, OptimizerState& st, const AdamWConfig& cfg) {
    ++st.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (auto& [name, p] : params.entries()) {
        const Tensor& g = grads.get(name);
        Tensor& m = st.m.get(name);
        Tensor& v = st.v.get(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1, vhat = v[i] / c2;
            p[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
}

void ema_update(const ParamStore& params, OptimizerState& st, double decay) {
    for (const auto& [name, p] : params.entries()) {
        Tensor& e = st.ema.get(name);
        for (std::size_t i = 0; i < p.size(); ++i) e[i] = decay * e[i] + (1.0 - decay) * p[i];
    }
}

// ---- training -------------------------------------------------------------------------

nlohmann::json train_config_to_json(const TrainConfig& t) {
    return {{"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"seed", t.seed},
            {"lr", t.opt.lr},
            {"beta1", t.opt.beta1},
            {"beta2", t.opt.beta2},
            {"adam_eps", t.opt.eps},
            {"weight_decay", t.opt.weight_decay},
            {"clip_norm", t.opt.clip_norm},
            {"ema_decay", t.opt.ema_decay}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig t;
    for (const auto& [key, value] : j.items()) {
        if (key == "epochs") t.epochs = value.get<std::size_t>();
        else if (key == "batch_size") t.batch_size = value.get<std::size_t>();
        else if (key == "seed") t.seed = value.get<std::uint64_t>();
        else if (key == "lr") t.opt.lr = value.get<double>();
        else if (key == "beta1") t.opt.beta1 = value.get<double>();
        else if (key == "beta2") t.opt.beta2 = value.get<double>();
        else if (key == "adam_eps") t.opt.eps = value.get<double>();
        else if (key == "weight_decay") t.opt.weight_decay = value.get<double>();
        else if (key == "clip_norm") t.opt.clip_norm = value.get<double>();
        else if (key == "ema_decay") t.opt.ema_decay = value.get<double>();
        else throw std::invalid_argument("unknown training config key: " + key);
    }
    if (t.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(t.opt.lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (t.opt.ema_decay < 0.0 || t.opt.ema_decay >= 1.0) throw std::invalid_argument("ema_decay must be in [0, 1)");
    return t;
}

Trainer::Trainer(const ModelConfig& model, const TrainConfig& train, std::uint64_t init_seed)
    : model_(model), train_(train_config_from_json(train_config_to_json(train))) {
    model_.validate();
    params_ = net::init_model(model_, init_seed);
    opt_ = init_optimizer(params_);
}

Trainer::Trainer(const Checkpoint& ck) : model_(ck.config) {
    const auto& meta = ck.meta;
    if (meta.value("kind", "") != "trainer") throw std::invalid_argument("checkpoint does not hold trainer state");
    train_ = train_config_from_json(meta.at("train"));
    epoch_ = meta.at("epoch").get<std::size_t>();
    opt_.step = meta.at("step").get<std::uint64_t>();
    for (const auto& [name, t] : ck.tensors.entries()) {
        if (name.rfind("ema/", 0) == 0) opt_.ema.add(name.substr(4), t);
        else if (name.rfind("opt.m/", 0) == 0) opt_.m.add(name.substr(6), t);
        else if (name.rfind("opt.v/", 0) == 0) opt_.v.add(name.substr(6), t);
        else params_.add(name, t);
    }
    if (opt_.m.size() != params_.size() || opt_.v.size() != params_.size() || opt_.ema.size() != params_.size())
        throw std::invalid_argument("checkpoint optimizer state is incomplete");
}

ElboReport Trainer::train_step(const Tensor& x, const Tensor& mask, const Tensor& eps) {
    ad::Tape t;
    BoundParams b(t, params_, true);
    auto terms = elbo_terms(b, model_, x, mask, eps);
    const ElboReport report{terms.recon.value().item(), terms.kl.value().item(), terms.elbo.value().item()};
    if (!std::isfinite(report.elbo)) throw std::runtime_error("training diverged: non-finite ELBO");
    t.backward(ad::scale(terms.elbo, -1.0));
    ParamStore grads = b.gradients();
    clip_global_norm(grads, train_.opt.clip_norm);
    adamw_step(params_, grads, opt_, train_.opt);
    ema_update(params_, opt_, train_.opt.ema_decay);
    return report;
}

EpochRecord Trainer::run_epoch(const Tensor& x, const Tensor& mask) {
    check_batch(model_, x);
    const Tensor m = ones_mask(x, mask);
    const auto start = std::chrono::steady_clock::now();
    const std::size_t S = x.dim(0), L = x.dim(1);
    std::seed_seq seq{static_cast<std::uint32_t>(train_.seed), static_cast<std::uint32_t>(train_.seed >> 32),
                      static_cast<std::uint32_t>(epoch_)};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> order(S);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    for (std::size_t begin = 0; begin < S; begin += train_.batch_size) {
        const std::size_t count = std::min(train_.batch_size, S - begin);
        std::span<const std::size_t> idx(order.data() + begin, count);
        Tensor eps = standard_normal({count, L, model_.latent_dim}, rng);
        const ElboReport r = train_step(gather_rows(x, idx), gather_rows(m, idx), eps);
        const double w = static_cast<double>(count) / static_cast<double>(S);
        rec.report.recon += w * r.recon;
        rec.report.kl += w * r.kl;
        rec.report.elbo += w * r.elbo;
    }
    rec.epoch = epoch_++;
    rec.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint ck;
    ck.config = model_;
    ck.meta = {{"kind", "trainer"}, {"epoch", epoch_}, {"step", opt_.step}, {"train", train_config_to_json(train_)}};
    for (const auto& [name, t] : params_.entries()) ck.tensors.add(name, t);
    for (const auto& [name, t] : opt_.ema.entries()) ck.tensors.add("ema/" + name, t);
    for (const auto& [name, t] : opt_.m.entries()) ck.tensors.add("opt.m/" + name, t);
    for (const auto& [name, t] : opt_.v.entries()) ck.tensors.add("opt.v/" + name, t);
    return ck;
}

ParamStore checkpoint_params(const Checkpoint& ck, bool use_ema) {
    ParamStore raw, ema;
    for (const auto& [name, t] : ck.tensors.entries()) {
        if (name.rfind("ema/", 0) == 0) ema.add(name.substr(4), t);
        else if (name.find('/') == std::string::npos) raw.add(name, t);
    }
    return use_ema && ema.size() == raw.size() ? ema : raw;
}

// ---- sampling and tasks ---------------------------------------------------------------

Generated generate(const ParamStore& params, const ModelConfig& cfg, std::size_t n, std::size_t length,
                   std::uint64_t seed, GenerateOptions opts) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    net::PriorStepper prior(params, cfg, n);
    net::GenStepper gen(params, cfg, n);
    Generated out{Tensor({n, length, cfg.x_dim}), Tensor({n, length, cfg.latent_dim}), Tensor({n, length, cfg.x_dim})};
    for (std::size_t l = 0; l < length; ++l) {
        auto [mu, sigma] = prior.peek();
        Tensor z = opts.sample_z ? add_noise(mu, &sigma, 0.0, rng) : mu;
        Tensor mu_x = gen.peek(z);
        Tensor x = opts.sample_x ? add_noise(mu_x, nullptr, cfg.sigma_x, rng) : mu_x;
        gen.step(z, cfg.decoder_uses_x ? &x : nullptr);
        prior.step(z);
        put_slice(out.x, l, x);
        put_slice(out.z, l, z);
        put_slice(out.mu_x, l, mu_x);
    }
    return out;
}

Tensor interpolate(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask) {
    Posterior q = posterior(params, cfg, x, mask);
    return decode_mean(params, cfg, q.mu, q.x_filled);
}

Tensor interpolate_samples(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask,
                           std::size_t samples, std::uint64_t seed) {
    Posterior q = posterior(params, cfg, x, mask);
    std::mt19937_64 rng(seed);
    Tensor out({samples, x.dim(0), x.dim(1), x.dim(2)});
    for (std::size_t s = 0; s < samples; ++s) {
        Tensor z = add_noise(q.mu, &q.sigma, 0.0, rng);
        Tensor xs = add_noise(decode_mean(params, cfg, z, q.x_filled), nullptr, cfg.sigma_x, rng);
        std::copy(xs.storage().begin(), xs.storage().end(), out.storage().begin() + static_cast<long>(s * xs.size()));
    }
    return out;
}

namespace {

// Conditions the steppers on the observed prefix, then rolls forward for `horizon` steps.
Tensor roll_forward(const ParamStore& params, const ModelConfig& cfg, const Tensor& x_first, const Tensor& z_first,
                    std::size_t horizon, std::mt19937_64* rng, const Posterior& q) {
    const std::size_t B = x_first.dim(0), L0 = x_first.dim(1);
    net::PriorStepper prior(params, cfg, B);
    net::GenStepper gen(params, cfg, B);
    for (std::size_t l = 0; l < L0; ++l) {
        Tensor z = time_slice(z_first, l);
        Tensor x = time_slice(q.x_filled, l);
        gen.step(z, cfg.decoder_uses_x ? &x : nullptr);
        prior.step(z);
    }
    Tensor out({B, horizon, cfg.x_dim});
    for (std::size_t h = 0; h < horizon; ++h) {
        auto [mu, sigma] = prior.peek();
        Tensor z = rng ? add_noise(mu, &sigma, 0.0, *rng) : mu;
        Tensor mu_x = gen.peek(z);
        Tensor x = rng ? add_noise(mu_x, nullptr, cfg.sigma_x, *rng) : mu_x;
        gen.step(z, cfg.decoder_uses_x ? &x : nullptr);
        prior.step(z);
        put_slice(out, h, x);
    }
    return out;
}

}  // namespace

Extrapolation extrapolate(const ParamStore& params, const ModelConfig& cfg, const Tensor& x_first,
                          std::size_t horizon, std::size_t samples, std::uint64_t seed) {
    check_batch(cfg, x_first);
    const std::size_t B = x_first.dim(0);
    Extrapolation out{Tensor({B, horizon, cfg.x_dim}), Tensor({samples, B, horizon, cfg.x_dim})};
    if (horizon == 0) return out;
    if (x_first.dim(1) == 0) throw std::invalid_argument("extrapolate: empty conditioning prefix");
    Posterior q = posterior(params, cfg, x_first, {});
    out.mean = roll_forward(params, cfg, x_first, q.mu, horizon, nullptr, q);
    std::mt19937_64 rng(seed);
    for (std::size_t s = 0; s < samples; ++s) {
        Tensor z = add_noise(q.mu, &q.sigma, 0.0, rng);
        Tensor path = roll_forward(params, cfg, x_first, z, horizon, &rng, q);
        std::copy(path.storage().begin(), path.storage().end(),
                  out.samples.storage().begin() + static_cast<long>(s * path.size()));
    }
    return out;
}

}  // namespace ls4::vae

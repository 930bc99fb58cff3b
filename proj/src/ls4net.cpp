#include "ls4/ls4net.hpp"

#include <cmath>
#include <stdexcept>

#include "arch.hpp"
#include "ls4/ssm.hpp"

namespace ls4::net {

using ad::Var;

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw std::invalid_argument(std::string("model config: ") + name + " must be positive");
    };
    positive(H, "H");
    positive(N, "N");
    positive(latent_dim, "latent_dim");
    positive(num_layers1, "num_layers1");
    positive(num_layers2, "num_layers2");
    positive(x_dim, "x_dim");
    if (!(sigma_x > 0.0)) throw std::invalid_argument("model config: sigma_x must be > 0");
    if (!(delta > 0.0)) throw std::invalid_argument("model config: delta must be > 0");
}

// ---- initialization ----------------------------------------------------------------

namespace {

Tensor uniform(Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = u(rng);
    return t;
}

void add_ssm_transition(ParamStore& s, const std::string& name, std::size_t H, std::size_t N) {
    s.add(name, ssm::hippo_bank(H, N));
}

void add_mixer(ParamStore& s, const std::string& prefix, std::size_t H, Rng& rng) {
    init_linear(s, prefix, H, H, rng);
}

}  // namespace

void init_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    store.add(prefix + ".W", uniform({out, in}, bound, rng));
    store.add(prefix + ".b", uniform({out}, bound, rng));
}

void init_layernorm(ParamStore& store, const std::string& prefix, std::size_t width) {
    store.add(prefix + ".g", Tensor({width}, 1.0));
    store.add(prefix + ".b", Tensor({width}, 0.0));
}

void init_resblock(ParamStore& store, const std::string& prefix, std::size_t width, Rng& rng) {
    init_linear(store, prefix + ".l1", width, 2 * width, rng);
    init_linear(store, prefix + ".l2", 2 * width, width, rng);
}

void init_prior_block(ParamStore& s, const std::string& p, std::size_t H, std::size_t N, Rng& rng) {
    const double cb = 1.0 / std::sqrt(static_cast<double>(N));
    add_ssm_transition(s, p + ".A1", H, N);
    add_ssm_transition(s, p + ".A2", H, N);
    s.add(p + ".E2", uniform({H, N}, 1.0, rng));
    s.add(p + ".C", uniform({H, N}, cb, rng));
    s.add(p + ".F", uniform({H}, 1.0, rng));
    add_mixer(s, p + ".mix", H, rng);
    init_layernorm(s, p + ".ln", H);
}

void init_gen_block(ParamStore& s, const std::string& p, std::size_t H, std::size_t N, Rng& rng) {
    const double cb = 1.0 / std::sqrt(static_cast<double>(N));
    add_ssm_transition(s, p + ".A3", H, N);
    s.add(p + ".E3", uniform({H, N}, 1.0, rng));
    add_ssm_transition(s, p + ".A4", H, N);
    s.add(p + ".B4", uniform({H, N}, 1.0, rng));
    s.add(p + ".E4", uniform({H, N}, 1.0, rng));
    for (const char* o : {"x", "z"}) {
        const std::string so(o);
        s.add(p + ".C" + so, uniform({H, N}, cb, rng));
        s.add(p + ".D" + so, uniform({H}, 1.0, rng));
        s.add(p + ".F" + so, uniform({H}, 1.0, rng));
        add_mixer(s, p + ".mix_" + so, H, rng);
        init_layernorm(s, p + ".ln_" + so, H);
    }
}

void init_inf_block(ParamStore& s, const std::string& p, std::size_t H, std::size_t N, Rng& rng) {
    const double cb = 1.0 / std::sqrt(static_cast<double>(N));
    add_ssm_transition(s, p + ".A5", H, N);
    s.add(p + ".B5", uniform({H, N}, 1.0, rng));
    s.add(p + ".C", uniform({H, N}, cb, rng));
    s.add(p + ".D", uniform({H}, 1.0, rng));
    add_mixer(s, p + ".mix", H, rng);
    init_layernorm(s, p + ".ln", H);
}

namespace {

using BlockInit = void (*)(ParamStore&, const std::string&, std::size_t, std::size_t, Rng&);

void init_single_stream(ParamStore& s, const ModelConfig& cfg, const std::string& p, std::size_t in,
                        std::size_t out, BlockInit block, Rng& rng) {
    using arch::idx;
    using arch::level_width;
    init_linear(s, p + "enc", in, cfg.H, rng);
    for (std::size_t i = 0; i < cfg.num_layers1; ++i)
        init_linear(s, idx(p + "down", i), level_width(cfg, i), level_width(cfg, i + 1), rng);
    const std::size_t top = level_width(cfg, cfg.num_layers1);
    for (std::size_t j = 0; j < cfg.num_layers2; ++j) {
        block(s, idx(p + "mid", j) + ".block", top, cfg.N, rng);
        init_resblock(s, idx(p + "mid", j) + ".res", top, rng);
    }
    for (std::size_t i = 0; i < cfg.num_layers1; ++i) {
        const std::size_t from = level_width(cfg, cfg.num_layers1 - i), to = level_width(cfg, cfg.num_layers1 - i - 1);
        const std::string q = idx(p + "up", i);
        init_linear(s, q, from, to, rng);
        for (std::size_t j = 0; j < cfg.num_layers2; ++j) {
            block(s, q + "." + std::to_string(j) + ".block", to, cfg.N, rng);
            init_resblock(s, q + "." + std::to_string(j) + ".res", to, rng);
        }
    }
    init_layernorm(s, p + "norm", cfg.H);
    init_linear(s, p + "out", cfg.H, out, rng);
    block(s, p + "mu", out, cfg.N, rng);
    block(s, p + "sigma", out, cfg.N, rng);
}

void init_generative(ParamStore& s, const ModelConfig& cfg, Rng& rng) {
    using arch::idx;
    using arch::level_width;
    const std::string p = "gen.";
    init_linear(s, p + "enc_z", cfg.latent_dim, cfg.H, rng);
    if (cfg.decoder_uses_x) {
        init_linear(s, p + "enc_x", cfg.x_dim, cfg.H, rng);
    } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.x_dim));
        s.add(p + "enc_x.b", uniform({cfg.H}, bound, rng));
    }
    for (std::size_t i = 0; i < cfg.num_layers1; ++i) {
        init_linear(s, idx(p + "down_z", i), level_width(cfg, i), level_width(cfg, i + 1), rng);
        init_linear(s, idx(p + "down_x", i), level_width(cfg, i), level_width(cfg, i + 1), rng);
    }
    const std::size_t top = level_width(cfg, cfg.num_layers1);
    for (std::size_t j = 0; j < cfg.num_layers2; ++j) {
        init_gen_block(s, idx(p + "mid", j) + ".block", top, cfg.N, rng);
        init_resblock(s, idx(p + "mid", j) + ".res", 2 * top, rng);
    }
    for (std::size_t i = 0; i < cfg.num_layers1; ++i) {
        const std::size_t from = level_width(cfg, cfg.num_layers1 - i), to = level_width(cfg, cfg.num_layers1 - i - 1);
        const std::string q = idx(p + "up", i);
        init_linear(s, idx(p + "up_z", i), from, to, rng);
        init_linear(s, idx(p + "up_x", i), from, to, rng);
        for (std::size_t j = 0; j < cfg.num_layers2; ++j) {
            init_gen_block(s, q + "." + std::to_string(j) + ".block", to, cfg.N, rng);
            init_resblock(s, q + "." + std::to_string(j) + ".res", 2 * to, rng);
        }
    }
    init_layernorm(s, p + "norm_x", cfg.H);
    init_layernorm(s, p + "norm_z", cfg.H);
    init_linear(s, p + "out", 2 * cfg.H, cfg.x_dim, rng);
}

}  // namespace

ParamStore init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ParamStore s;
    init_single_stream(s, cfg, "prior.", cfg.latent_dim, cfg.latent_dim, &init_prior_block, rng);
    init_generative(s, cfg, rng);
    init_single_stream(s, cfg, "inf.", 2 * cfg.x_dim, cfg.latent_dim, &init_inf_block, rng);
    return s;
}

// ---- convolutional mode --------------------------------------------------------------

namespace {

void require_sequence(Var v, std::size_t heads, const std::string& prefix) {
    const auto& s = v.shape();
    if (s.size() != 3) throw std::invalid_argument(prefix + ": expected [B, L, H], got " + shape_string(s));
    if (s[1] == 0) throw std::invalid_argument(prefix + ": empty sequence");
    if (s[2] != heads) {
        throw std::invalid_argument(prefix + ": input has " + std::to_string(s[2]) + " channels but the block has " +
                                    std::to_string(heads) + " heads");
    }
}

Var mix_norm(BoundParams& p, const std::string& mix, const std::string& ln, Var y) {
    Var m = ad::linear(y, p(mix + ".W"), p(mix + ".b"));
    return ad::layernorm(m, p(ln + ".g"), p(ln + ".b"));
}

}  // namespace

Var prior_layer_forward(BoundParams& p, const std::string& prefix, Var z, double delta) {
    Var A1 = p(prefix + ".A1");
    require_sequence(z, A1.shape()[0], prefix);
    const std::size_t L = z.shape()[1];
    Var abar1 = ssm::bilinear_transition(A1, delta);
    Var A2 = p(prefix + ".A2");
    Var abar2 = ssm::bilinear_transition(A2, delta);
    Var ebar2 = ssm::bilinear_input(A2, p(prefix + ".E2"), delta);
    Var c = ssm::readout_through(p(prefix + ".C"), abar1);
    Var K = ssm::kernel_bank(c, abar2, ebar2, L);
    Var zs = ad::shift_time(z);
    Var y = ad::add(ad::causal_conv_bank(zs, K), ad::mul_last(zs, p(prefix + ".F")));
    return ad::gelu(y);
}

Var headstack_forward(BoundParams& p, const std::string& prefix, Var z, double delta) {
    Var y = prior_layer_forward(p, prefix, z, delta);
    return ad::linear(y, p(prefix + ".mix.W"), p(prefix + ".mix.b"));
}

Var prior_block_forward(BoundParams& p, const std::string& prefix, Var z, double delta) {
    Var y = prior_layer_forward(p, prefix, z, delta);
    return ad::add(mix_norm(p, prefix + ".mix", prefix + ".ln", y), ad::shift_time(z));
}

std::pair<Var, Var> gen_layer_forward(BoundParams& p, const std::string& prefix, Var x, Var z, double delta) {
    Var A3 = p(prefix + ".A3");
    const std::size_t H = A3.shape()[0];
    require_sequence(x, H, prefix);
    require_sequence(z, H, prefix);
    if (x.shape() != z.shape()) {
        throw std::invalid_argument(prefix + ": x " + shape_string(x.shape()) + " and z " + shape_string(z.shape()) +
                                    " are not aligned");
    }
    const std::size_t L = x.shape()[1];
    Var abar3 = ssm::bilinear_transition(A3, delta);
    Var ebar3 = ssm::bilinear_input(A3, p(prefix + ".E3"), delta);
    Var A4 = p(prefix + ".A4");
    Var abar4 = ssm::bilinear_transition(A4, delta);
    Var bbar4 = ssm::bilinear_input(A4, p(prefix + ".B4"), delta);
    Var ebar4 = ssm::bilinear_input(A4, p(prefix + ".E4"), delta);
    Var xs = ad::shift_time(x), zs = ad::shift_time(z);
    auto stream = [&](const std::string& o) {
        Var C = p(prefix + ".C" + o);
        Var c = ssm::readout_through(C, abar3);
        Var kb = ssm::kernel_bank(c, abar4, bbar4, L);
        Var ke = ssm::add_lag0(ssm::kernel_bank(c, abar4, ebar4, L), ssm::rowdot(C, ebar3));
        Var y = ad::add(ad::causal_conv_bank(xs, kb), ad::causal_conv_bank(zs, ke));
        y = ad::add(y, ad::mul_last(xs, p(prefix + ".D" + o)));
        y = ad::add(y, ad::mul_last(z, p(prefix + ".F" + o)));
        return ad::gelu(y);
    };
    Var gx = stream("x");
    Var gz = stream("z");
    return {gx, gz};
}

std::pair<Var, Var> gen_block_forward(BoundParams& p, const std::string& prefix, Var x, Var z, double delta) {
    auto [gx, gz] = gen_layer_forward(p, prefix, x, z, delta);
    Var ox = ad::add(mix_norm(p, prefix + ".mix_x", prefix + ".ln_x", gx), ad::shift_time(x));
    Var oz = ad::add(mix_norm(p, prefix + ".mix_z", prefix + ".ln_z", gz), z);
    return {ox, oz};
}

Var inf_layer_forward(BoundParams& p, const std::string& prefix, Var x, double delta) {
    Var A5 = p(prefix + ".A5");
    require_sequence(x, A5.shape()[0], prefix);
    const std::size_t L = x.shape()[1];
    Var abar = ssm::bilinear_transition(A5, delta);
    Var bbar = ssm::bilinear_input(A5, p(prefix + ".B5"), delta);
    Var K = ssm::kernel_bank(p(prefix + ".C"), abar, bbar, L);
    Var y = ad::add(ad::causal_conv_bank(x, K), ad::mul_last(x, p(prefix + ".D")));
    return ad::gelu(y);
}

Var inf_block_forward(BoundParams& p, const std::string& prefix, Var x, double delta) {
    Var y = inf_layer_forward(p, prefix, x, delta);
    return ad::add(mix_norm(p, prefix + ".mix", prefix + ".ln", y), x);
}

Var resblock_forward(BoundParams& p, const std::string& prefix, Var x) {
    Var h = ad::gelu(ad::linear(x, p(prefix + ".l1.W"), p(prefix + ".l1.b")));
    return ad::add(ad::linear(h, p(prefix + ".l2.W"), p(prefix + ".l2.b")), x);
}

namespace {

struct ConvExec {
    using T = Var;
    BoundParams& p;
    double delta;

    T linear(const std::string& name, T x) { return ad::linear(x, p(name + ".W"), p(name + ".b")); }
    T bias_like(const std::string& name, T like) {
        Var b = p(name + ".b");
        Shape s = like.shape();
        s.back() = b.shape()[0];
        return ad::add_last(p.tape().constant(Tensor(s, 0.0)), b);
    }
    T resblock(const std::string& name, T x) { return resblock_forward(p, name, x); }
    T layernorm(const std::string& name, T x) { return ad::layernorm(x, p(name + ".g"), p(name + ".b")); }
    T add(T a, T b) { return ad::add(a, b); }
    T concat(T a, T b) { return ad::concat_last(a, b); }
    T slice(T x, std::size_t begin, std::size_t count) { return ad::slice_last(x, begin, count); }
    T positive(T x) { return ad::add_scalar(ad::softplus(x), kSigmaFloor); }
    T prior_block(const std::string& name, T z) { return prior_block_forward(p, name, z, delta); }
    T inf_block(const std::string& name, T x) { return inf_block_forward(p, name, x, delta); }
    std::pair<T, T> gen_block(const std::string& name, T x, T z) { return gen_block_forward(p, name, x, z, delta); }
};

void require_model_input(Var v, std::size_t width, const char* what) {
    const auto& s = v.shape();
    if (s.size() != 3 || s[1] == 0 || s[2] != width) {
        throw std::invalid_argument(std::string(what) + ": expected [B, L>0, " + std::to_string(width) + "], got " +
                                    shape_string(s));
    }
}

}  // namespace

GaussianVars prior_model_forward(BoundParams& p, const ModelConfig& cfg, Var z) {
    require_model_input(z, cfg.latent_dim, "prior model");
    ConvExec ex{p, cfg.delta};
    auto [mu, sigma] = arch::prior(ex, cfg, z);
    return {mu, sigma};
}

Var gen_model_forward(BoundParams& p, const ModelConfig& cfg, Var z, Var x) {
    require_model_input(z, cfg.latent_dim, "generative model");
    ConvExec ex{p, cfg.delta};
    Var xs;
    if (cfg.decoder_uses_x) {
        if (!x.valid()) throw std::invalid_argument("generative model: decoder_uses_x requires x");
        require_model_input(x, cfg.x_dim, "generative model");
        if (x.shape()[0] != z.shape()[0] || x.shape()[1] != z.shape()[1])
            throw std::invalid_argument("generative model: x and z lengths differ");
        xs = ad::shift_time(x);
    }
    return arch::generative(ex, cfg, z, xs);
}

GaussianVars inf_model_forward(BoundParams& p, const ModelConfig& cfg, Var x, Var mask) {
    require_model_input(x, cfg.x_dim, "inference model");
    if (mask.shape() != x.shape()) throw std::invalid_argument("inference model: mask shape differs from x");
    ConvExec ex{p, cfg.delta};
    Var input = ad::concat_last(ad::mul(x, mask), mask);
    auto [mu, sigma] = arch::inference(ex, cfg, input);
    return {mu, sigma};
}

// ---- stepwise mode ---------------------------------------------------------------

namespace {

Tensor row_concat(const Tensor& a, const Tensor& b) {
    const std::size_t B = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    Tensor out({B, ca + cb});
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < ca; ++j) out.at(i, j) = a.at(i, j);
        for (std::size_t j = 0; j < cb; ++j) out.at(i, ca + j) = b.at(i, j);
    }
    return out;
}

Tensor row_slice(const Tensor& x, std::size_t begin, std::size_t count) {
    const std::size_t B = x.dim(0);
    Tensor out({B, count});
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < count; ++j) out.at(i, j) = x.at(i, begin + j);
    return out;
}

void add_into(Tensor& a, const Tensor& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

Tensor gelu_of(Tensor t) {
    for (auto& v : t.storage()) v = ad::gelu_value(v);
    return t;
}

Tensor mix_norm_value(const ParamStore& P, const std::string& mix, const std::string& ln, const Tensor& y) {
    Tensor m = ad::linear_value(y, P.get(mix + ".W"), &P.get(mix + ".b"));
    return ad::layernorm_value(m, P.get(ln + ".g"), P.get(ln + ".b"));
}

/// Discretized operators of one block, computed once per stepper.
struct BlockCache {
    Tensor abar, bbar, ebar;    // state update
    Tensor cx, cz;              // readouts (prior and inference blocks use cx)
    Tensor ex0, ez0;            // lag-0 z terms of the generative block
};

struct BlockRuntime {
    std::shared_ptr<const BlockCache> cache;
    std::vector<double> state;
    Tensor prev_x, prev_z;
};

Tensor rowdot_value(const Tensor& a, const Tensor& b) {
    Tensor out({a.dim(0)});
    for (std::size_t h = 0; h < a.dim(0); ++h)
        for (std::size_t i = 0; i < a.dim(1); ++i) out[h] += a.at(h, i) * b.at(h, i);
    return out;
}

}  // namespace

class StepState {
public:
    std::map<std::string, BlockRuntime> blocks;
    Tensor shift_prev;
    std::size_t position = 0;
};

namespace {

struct StepExec {
    using T = Tensor;
    const ParamStore& P;
    double delta;
    std::size_t batch;
    StepState& st;

    T linear(const std::string& name, const T& x) { return ad::linear_value(x, P.get(name + ".W"), &P.get(name + ".b")); }
    T bias_like(const std::string& name, const T&) {
        const Tensor& b = P.get(name + ".b");
        Tensor out({batch, b.size()});
        for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t j = 0; j < b.size(); ++j) out.at(i, j) = b[j];
        return out;
    }
    T resblock(const std::string& name, const T& x) {
        T h = gelu_of(linear(name + ".l1", x));
        T out = linear(name + ".l2", h);
        add_into(out, x);
        return out;
    }
    T layernorm(const std::string& name, const T& x) {
        return ad::layernorm_value(x, P.get(name + ".g"), P.get(name + ".b"));
    }
    T add(T a, const T& b) {
        add_into(a, b);
        return a;
    }
    T concat(const T& a, const T& b) { return row_concat(a, b); }
    T slice(const T& x, std::size_t begin, std::size_t count) { return row_slice(x, begin, count); }
    T positive(T x) {
        for (auto& v : x.storage()) v = ad::softplus_value(v) + kSigmaFloor;
        return x;
    }

    BlockRuntime& runtime(const std::string& name, std::size_t H, std::size_t N,
                          const std::function<BlockCache()>& build) {
        auto it = st.blocks.find(name);
        if (it != st.blocks.end()) return it->second;
        BlockRuntime rt;
        rt.cache = std::make_shared<const BlockCache>(build());
        rt.state.assign(batch * H * N, 0.0);
        rt.prev_x = Tensor({batch, H});
        rt.prev_z = Tensor({batch, H});
        return st.blocks.emplace(name, std::move(rt)).first->second;
    }

    T prior_block(const std::string& name, const T& z) {
        const Tensor& A1 = P.get(name + ".A1");
        const std::size_t H = A1.dim(0), N = A1.dim(1);
        BlockRuntime& rt = runtime(name, H, N, [&] {
            BlockCache c;
            const Tensor& A2 = P.get(name + ".A2");
            c.abar = ssm::bilinear_transition_value(A2, delta);
            c.ebar = ssm::bilinear_input_value(A2, P.get(name + ".E2"), delta);
            c.cx = ssm::readout_through_value(P.get(name + ".C"), ssm::bilinear_transition_value(A1, delta));
            return c;
        });
        const Tensor zs = rt.prev_z;
        ssm::bank_step(rt.cache->abar, rt.state, batch, rt.cache->ebar, zs.data().data());
        Tensor y({batch, H});
        ssm::bank_readout(rt.cache->cx, rt.state, batch, y.data());
        const Tensor& F = P.get(name + ".F");
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < H; ++h) y.at(b, h) = ad::gelu_value(y.at(b, h) + F[h] * zs.at(b, h));
        Tensor out = mix_norm_value(P, name + ".mix", name + ".ln", y);
        add_into(out, zs);
        rt.prev_z = z;
        return out;
    }

    std::pair<T, T> gen_block(const std::string& name, const T& x, const T& z) {
        const Tensor& A3 = P.get(name + ".A3");
        const std::size_t H = A3.dim(0), N = A3.dim(1);
        BlockRuntime& rt = runtime(name, H, N, [&] {
            BlockCache c;
            const Tensor& A4 = P.get(name + ".A4");
            c.abar = ssm::bilinear_transition_value(A4, delta);
            c.bbar = ssm::bilinear_input_value(A4, P.get(name + ".B4"), delta);
            c.ebar = ssm::bilinear_input_value(A4, P.get(name + ".E4"), delta);
            const Tensor abar3 = ssm::bilinear_transition_value(A3, delta);
            const Tensor ebar3 = ssm::bilinear_input_value(A3, P.get(name + ".E3"), delta);
            c.cx = ssm::readout_through_value(P.get(name + ".Cx"), abar3);
            c.cz = ssm::readout_through_value(P.get(name + ".Cz"), abar3);
            c.ex0 = rowdot_value(P.get(name + ".Cx"), ebar3);
            c.ez0 = rowdot_value(P.get(name + ".Cz"), ebar3);
            return c;
        });
        const Tensor xs = rt.prev_x, zs = rt.prev_z;
        ssm::bank_step(rt.cache->abar, rt.state, batch, rt.cache->bbar, xs.data().data(), &rt.cache->ebar,
                       zs.data().data());
        auto stream = [&](const Tensor& c, const Tensor& lag0, const std::string& o) {
            Tensor y({batch, H});
            ssm::bank_readout(c, rt.state, batch, y.data());
            const Tensor& D = P.get(name + ".D" + o);
            const Tensor& F = P.get(name + ".F" + o);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < H; ++h)
                    y.at(b, h) = ad::gelu_value(y.at(b, h) + lag0[h] * zs.at(b, h) + D[h] * xs.at(b, h) +
                                                F[h] * z.at(b, h));
            return mix_norm_value(P, name + ".mix_" + o, name + ".ln_" + o, y);
        };
        Tensor ox = stream(rt.cache->cx, rt.cache->ex0, "x");
        Tensor oz = stream(rt.cache->cz, rt.cache->ez0, "z");
        add_into(ox, xs);
        add_into(oz, z);
        rt.prev_x = x;
        rt.prev_z = z;
        return {ox, oz};
    }

    T inf_block(const std::string& name, const T& x) {
        const Tensor& A5 = P.get(name + ".A5");
        const std::size_t H = A5.dim(0), N = A5.dim(1);
        BlockRuntime& rt = runtime(name, H, N, [&] {
            BlockCache c;
            c.abar = ssm::bilinear_transition_value(A5, delta);
            c.bbar = ssm::bilinear_input_value(A5, P.get(name + ".B5"), delta);
            c.cx = P.get(name + ".C");
            return c;
        });
        ssm::bank_step(rt.cache->abar, rt.state, batch, rt.cache->bbar, x.data().data());
        Tensor y({batch, H});
        ssm::bank_readout(rt.cache->cx, rt.state, batch, y.data());
        const Tensor& D = P.get(name + ".D");
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < H; ++h) y.at(b, h) = ad::gelu_value(y.at(b, h) + D[h] * x.at(b, h));
        Tensor out = mix_norm_value(P, name + ".mix", name + ".ln", y);
        add_into(out, x);
        return out;
    }
};

void require_rows(const Tensor& t, std::size_t batch, std::size_t width, const char* what) {
    if (t.rank() != 2 || t.dim(0) != batch || t.dim(1) != width) {
        throw std::invalid_argument(std::string(what) + ": expected [" + std::to_string(batch) + ", " +
                                    std::to_string(width) + "], got " + shape_string(t.shape()));
    }
}

}  // namespace

// The stepper classes keep a pointer to the parameters, which must outlive them.

PriorStepper::PriorStepper(const ParamStore& params, const ModelConfig& cfg, std::size_t batch)
    : params_(&params), cfg_(cfg), state_(std::make_unique<StepState>()) {
    cfg.validate();
    state_->shift_prev = Tensor({batch, 0});
}
PriorStepper::PriorStepper(const PriorStepper& o)
    : params_(o.params_), cfg_(o.cfg_), state_(std::make_unique<StepState>(*o.state_)) {}
PriorStepper& PriorStepper::operator=(const PriorStepper& o) {
    params_ = o.params_;
    cfg_ = o.cfg_;
    state_ = std::make_unique<StepState>(*o.state_);
    return *this;
}
PriorStepper::~PriorStepper() = default;
std::size_t PriorStepper::position() const { return state_->position; }

std::pair<Tensor, Tensor> PriorStepper::step(const Tensor& z_n) {
    const std::size_t batch = state_->shift_prev.dim(0);
    require_rows(z_n, batch, cfg_.latent_dim, "prior step");
    StepExec ex{*params_, cfg_.delta, batch, *state_};
    auto out = arch::prior(ex, cfg_, z_n);
    ++state_->position;
    return out;
}

std::pair<Tensor, Tensor> PriorStepper::peek() const {
    PriorStepper copy(*this);
    return copy.step(Tensor({state_->shift_prev.dim(0), cfg_.latent_dim}));
}

GenStepper::GenStepper(const ParamStore& params, const ModelConfig& cfg, std::size_t batch)
    : params_(&params), cfg_(cfg), state_(std::make_unique<StepState>()) {
    cfg.validate();
    state_->shift_prev = Tensor({batch, cfg.x_dim});
}
GenStepper::GenStepper(const GenStepper& o)
    : params_(o.params_), cfg_(o.cfg_), state_(std::make_unique<StepState>(*o.state_)) {}
GenStepper& GenStepper::operator=(const GenStepper& o) {
    params_ = o.params_;
    cfg_ = o.cfg_;
    state_ = std::make_unique<StepState>(*o.state_);
    return *this;
}
GenStepper::~GenStepper() = default;
std::size_t GenStepper::position() const { return state_->position; }

Tensor GenStepper::step(const Tensor& z_n, const Tensor* x_n) {
    const std::size_t batch = state_->shift_prev.dim(0);
    require_rows(z_n, batch, cfg_.latent_dim, "generative step");
    StepExec ex{*params_, cfg_.delta, batch, *state_};
    Tensor xs;
    if (cfg_.decoder_uses_x) {
        if (!x_n) throw std::invalid_argument("generative step: decoder_uses_x requires x");
        require_rows(*x_n, batch, cfg_.x_dim, "generative step");
        xs = state_->shift_prev;
        state_->shift_prev = *x_n;
    }
    Tensor out = arch::generative(ex, cfg_, z_n, xs);
    ++state_->position;
    return out;
}

Tensor GenStepper::peek(const Tensor& z_n) const {
    GenStepper copy(*this);
    Tensor dummy({state_->shift_prev.dim(0), cfg_.x_dim});
    return copy.step(z_n, &dummy);
}

InfStepper::InfStepper(const ParamStore& params, const ModelConfig& cfg, std::size_t batch)
    : params_(&params), cfg_(cfg), state_(std::make_unique<StepState>()) {
    cfg.validate();
    state_->shift_prev = Tensor({batch, 0});
}
InfStepper::InfStepper(const InfStepper& o)
    : params_(o.params_), cfg_(o.cfg_), state_(std::make_unique<StepState>(*o.state_)) {}
InfStepper& InfStepper::operator=(const InfStepper& o) {
    params_ = o.params_;
    cfg_ = o.cfg_;
    state_ = std::make_unique<StepState>(*o.state_);
    return *this;
}
InfStepper::~InfStepper() = default;

std::pair<Tensor, Tensor> InfStepper::step(const Tensor& x_n, const Tensor& mask_n) {
    const std::size_t batch = state_->shift_prev.dim(0);
    require_rows(x_n, batch, cfg_.x_dim, "inference step");
    require_rows(mask_n, batch, cfg_.x_dim, "inference step");
    Tensor masked = x_n;
    for (std::size_t i = 0; i < masked.size(); ++i) masked[i] *= mask_n[i];
    StepExec ex{*params_, cfg_.delta, batch, *state_};
    auto out = arch::inference(ex, cfg_, row_concat(masked, mask_n));
    ++state_->position;
    return out;
}

namespace {

Tensor time_slice(const Tensor& seq, std::size_t l) {
    const std::size_t B = seq.dim(0), C = seq.dim(2);
    Tensor out({B, C});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) out.at(b, c) = seq.at(b, l, c);
    return out;
}

void put_time_slice(Tensor& seq, std::size_t l, const Tensor& row) {
    const std::size_t B = seq.dim(0), C = seq.dim(2);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) seq.at(b, l, c) = row.at(b, c);
}

}  // namespace

Tensor prior_block_stepwise(const ParamStore& params, const std::string& prefix, const Tensor& z, double delta) {
    StepState st;
    StepExec ex{params, delta, z.dim(0), st};
    Tensor out(z.shape());
    for (std::size_t l = 0; l < z.dim(1); ++l) put_time_slice(out, l, ex.prior_block(prefix, time_slice(z, l)));
    return out;
}

std::pair<Tensor, Tensor> gen_block_stepwise(const ParamStore& params, const std::string& prefix, const Tensor& x,
                                             const Tensor& z, double delta) {
    StepState st;
    StepExec ex{params, delta, z.dim(0), st};
    Tensor ox(x.shape()), oz(z.shape());
    for (std::size_t l = 0; l < z.dim(1); ++l) {
        auto [a, b] = ex.gen_block(prefix, time_slice(x, l), time_slice(z, l));
        put_time_slice(ox, l, a);
        put_time_slice(oz, l, b);
    }
    return {ox, oz};
}

Tensor inf_block_stepwise(const ParamStore& params, const std::string& prefix, const Tensor& x, double delta) {
    StepState st;
    StepExec ex{params, delta, x.dim(0), st};
    Tensor out(x.shape());
    for (std::size_t l = 0; l < x.dim(1); ++l) put_time_slice(out, l, ex.inf_block(prefix, time_slice(x, l)));
    return out;
}

// ---- reduction ----------------------------------------------------------------------

namespace {

void zero(ParamStore& s, const std::string& name) { s.get(name).fill(0.0); }

void standard_normal_heads(ParamStore& s, const std::string& p) {
    zero(s, p + "out.W");
    zero(s, p + "out.b");
    zero(s, p + "mu.ln.g");
    zero(s, p + "mu.ln.b");
    zero(s, p + "sigma.ln.g");
    // softplus(beta) + floor == 1
    s.get(p + "sigma.ln.b").fill(std::log(std::expm1(1.0 - kSigmaFloor)));
}

void decouple_resblock(ParamStore& s, const std::string& name, std::size_t width) {
    // Input is concat(z, x) of 2*width; hidden units [0, 2w) serve z and [2w, 4w) serve x.
    Tensor& W1 = s.get(name + ".l1.W");
    Tensor& W2 = s.get(name + ".l2.W");
    const std::size_t hidden = 4 * width, in = 2 * width;
    for (std::size_t r = 0; r < hidden; ++r)
        for (std::size_t c = 0; c < in; ++c)
            if ((r < 2 * width) != (c < width)) W1.at(r, c) = 0.0;
    for (std::size_t r = 0; r < in; ++r)
        for (std::size_t c = 0; c < hidden; ++c)
            if ((r < width) != (c < 2 * width)) W2.at(r, c) = 0.0;
}

void reduce_gen_block(ParamStore& s, const std::string& name) {
    zero(s, name + ".E3");
    zero(s, name + ".E4");
    zero(s, name + ".Fx");
    zero(s, name + ".Fz");
}

}  // namespace

void apply_autoregressive_reduction(ParamStore& s, const ModelConfig& cfg) {
    if (!cfg.decoder_uses_x) throw std::invalid_argument("autoregressive reduction needs decoder_uses_x = true");
    using arch::idx;
    using arch::level_width;
    const std::string p = "gen.";
    const std::size_t top = level_width(cfg, cfg.num_layers1);
    for (std::size_t j = 0; j < cfg.num_layers2; ++j) {
        reduce_gen_block(s, idx(p + "mid", j) + ".block");
        decouple_resblock(s, idx(p + "mid", j) + ".res", top);
    }
    for (std::size_t i = 0; i < cfg.num_layers1; ++i) {
        const std::size_t width = level_width(cfg, cfg.num_layers1 - i - 1);
        for (std::size_t j = 0; j < cfg.num_layers2; ++j) {
            const std::string q = idx(p + "up", i) + "." + std::to_string(j);
            reduce_gen_block(s, q + ".block");
            decouple_resblock(s, q + ".res", width);
        }
    }
    // out acts on concat(x, z): drop the z columns.
    Tensor& W = s.get(p + "out.W");
    for (std::size_t r = 0; r < W.dim(0); ++r)
        for (std::size_t c = cfg.H; c < 2 * cfg.H; ++c) W.at(r, c) = 0.0;
    standard_normal_heads(s, "prior.");
    standard_normal_heads(s, "inf.");
}

}  // namespace ls4::net

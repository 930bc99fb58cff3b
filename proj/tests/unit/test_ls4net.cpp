#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>

#include "helpers.hpp"
#include "ls4/gradcheck.hpp"
#include "ls4/ls4net.hpp"
#include "net_oracles.hpp"

using namespace ls4;
using namespace ls4::net;
using ls4::test::random_tensor;

namespace {

// Outputs that must not react to a perturbation; FFT round-off sits far below this.
constexpr double kFlat = 1e-12;

ParamStore block_params(void (*init)(ParamStore&, const std::string&, std::size_t, std::size_t, Rng&),
                        std::size_t H, std::size_t N, unsigned seed) {
    ParamStore P;
    Rng rng(seed);
    init(P, "blk", H, N, rng);
    test::jitter(P, seed + 1);
    return P;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.H = 4;
    c.N = 4;
    c.latent_dim = 2;
    c.num_layers1 = 1;
    c.num_layers2 = 1;
    c.x_dim = 1;
    return c;
}

template <class F>
Tensor eval(const ParamStore& P, F f) {
    ad::Tape t;
    BoundParams b(t, P, false);
    return f(t, b).value();
}

}  // namespace

// ---- prior layer / block ----------------------------------------------------------

TEST(PriorLayer, PureSkipOnShiftedInput) {
    ParamStore P = block_params(&init_prior_block, 3, 4, 1);
    for (const char* n : {"blk.E2", "blk.C"}) P.get(n).fill(0.0);
    P.get("blk.F").fill(1.0);
    Tensor z = random_tensor({2, 5, 3}, 2);
    Tensor y = eval(P, [&](ad::Tape& t, BoundParams& b) { return prior_layer_forward(b, "blk", t.constant(z)); });
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t h = 0; h < 3; ++h) {
            EXPECT_EQ(y.at(b, 0, h), 0.0);
            for (std::size_t n = 1; n < 5; ++n) EXPECT_NEAR(y.at(b, n, h), test::gelu_ref(z.at(b, n - 1, h)), 1e-14);
        }
}

TEST(PriorLayer, MatchesTwoSegmentRecurrence) {
    for (unsigned seed : {3u, 4u, 5u}) {
        ParamStore P = block_params(&init_prior_block, 3, 5, seed);
        Tensor z = random_tensor({2, 12, 3}, seed + 10);
        Tensor y = eval(P, [&](ad::Tape& t, BoundParams& b) { return prior_layer_forward(b, "blk", t.constant(z)); });
        EXPECT_LT(max_abs_diff(y, test::prior_layer_ref(P, "blk", z)), 1e-8);
    }
}

TEST(PriorLayer, FirstPositionSeesNoInput) {
    ParamStore P = block_params(&init_prior_block, 2, 3, 6);
    Tensor z = random_tensor({1, 4, 2}, 7);
    Tensor y1 = eval(P, [&](ad::Tape& t, BoundParams& b) { return prior_layer_forward(b, "blk", t.constant(z)); });
    Tensor z2 = z;
    z2.at(0, 0, 0) += 3.0;
    z2.at(0, 0, 1) -= 2.0;
    Tensor y2 = eval(P, [&](ad::Tape& t, BoundParams& b) { return prior_layer_forward(b, "blk", t.constant(z2)); });
    EXPECT_NEAR(y1.at(0, 0, 0), y2.at(0, 0, 0), kFlat);
    EXPECT_NEAR(y1.at(0, 0, 1), y2.at(0, 0, 1), kFlat);
    EXPECT_EQ(y1.shape(), z.shape());
}

TEST(PriorLayer, EmptySequenceThrows) {
    ParamStore P = block_params(&init_prior_block, 2, 3, 6);
    ad::Tape t;
    BoundParams b(t, P, false);
    EXPECT_THROW(prior_layer_forward(b, "blk", t.constant(Tensor({1, 0, 2}))), std::invalid_argument);
}

TEST(PriorBlock, ZeroMixerGivesShiftedInput) {
    ParamStore P = block_params(&init_prior_block, 3, 4, 8);
    P.get("blk.mix.W").fill(0.0);
    P.get("blk.mix.b").fill(0.0);
    P.get("blk.ln.g").fill(1.0);
    P.get("blk.ln.b").fill(0.0);
    Tensor z = random_tensor({2, 6, 3}, 9);
    Tensor y = eval(P, [&](ad::Tape& t, BoundParams& b) { return prior_block_forward(b, "blk", t.constant(z)); });
    EXPECT_EQ(y.shape(), z.shape());
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t n = 0; n < 6; ++n)
            for (std::size_t h = 0; h < 3; ++h) EXPECT_NEAR(y.at(b, n, h), n ? z.at(b, n - 1, h) : 0.0, 1e-15);
}

TEST(PriorBlock, MatchesComposition) {
    ParamStore P = block_params(&init_prior_block, 4, 3, 10);
    Tensor z = random_tensor({2, 9, 4}, 11);
    Tensor y = eval(P, [&](ad::Tape& t, BoundParams& b) { return prior_block_forward(b, "blk", t.constant(z)); });
    EXPECT_LT(max_abs_diff(y, test::prior_block_ref(P, "blk", z)), 1e-8);
}

// ---- generative block ---------------------------------------------------------------

TEST(GenBlock, SkipOnly) {
    ParamStore P = block_params(&init_gen_block, 3, 4, 12);
    P.get("blk.Cx").fill(0.0);
    P.get("blk.Dx").fill(0.0);
    P.get("blk.Fx").fill(1.0);
    Tensor x = random_tensor({2, 5, 3}, 13), z = random_tensor({2, 5, 3}, 14);
    auto [gx, gz] = [&] {
        ad::Tape t;
        BoundParams b(t, P, false);
        auto r = gen_layer_forward(b, "blk", t.constant(x), t.constant(z));
        return std::make_pair(r.first.value(), r.second.value());
    }();
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(gx[i], test::gelu_ref(z[i]), 1e-14);
}

TEST(GenBlock, MatchesTwoSegmentRecurrence) {
    for (unsigned seed : {15u, 16u, 17u}) {
        ParamStore P = block_params(&init_gen_block, 3, 4, seed);
        Tensor x = random_tensor({2, 10, 3}, seed + 1), z = random_tensor({2, 10, 3}, seed + 2);
        ad::Tape t;
        BoundParams b(t, P, false);
        auto [ox, oz] = gen_block_forward(b, "blk", t.constant(x), t.constant(z));
        auto [rx, rz] = test::gen_block_ref(P, "blk", x, z);
        EXPECT_LT(max_abs_diff(ox.value(), rx), 1e-8);
        EXPECT_LT(max_abs_diff(oz.value(), rz), 1e-8);
    }
}

TEST(GenBlock, StreamCausality) {
    ParamStore P = block_params(&init_gen_block, 2, 3, 18);
    Tensor x = random_tensor({1, 8, 2}, 19), z = random_tensor({1, 8, 2}, 20);
    auto run = [&](const Tensor& xv, const Tensor& zv) {
        ad::Tape t;
        BoundParams b(t, P, false);
        auto r = gen_block_forward(b, "blk", t.constant(xv), t.constant(zv));
        return std::make_pair(r.first.value(), r.second.value());
    };
    auto base = run(x, z);
    const std::size_t n = 4;
    Tensor xp = x;
    xp.at(0, n, 0) += 1.0;
    auto px = run(xp, z);
    Tensor zp = z;
    zp.at(0, n, 1) += 1.0;
    auto pz = run(x, zp);
    for (std::size_t l = 0; l < 8; ++l)
        for (std::size_t h = 0; h < 2; ++h) {
            // x is history: position n itself is unaffected.
            if (l <= n) {
                EXPECT_NEAR(px.first.at(0, l, h), base.first.at(0, l, h), kFlat);
                EXPECT_NEAR(px.second.at(0, l, h), base.second.at(0, l, h), kFlat);
            }
            if (l < n) {
                EXPECT_NEAR(pz.first.at(0, l, h), base.first.at(0, l, h), kFlat);
                EXPECT_NEAR(pz.second.at(0, l, h), base.second.at(0, l, h), kFlat);
            }
        }
    EXPECT_NE(pz.second.at(0, n, 1), base.second.at(0, n, 1));
    EXPECT_NE(px.first.at(0, n + 1, 0), base.first.at(0, n + 1, 0));
}

TEST(GenBlock, LengthMismatchThrows) {
    ParamStore P = block_params(&init_gen_block, 2, 3, 21);
    ad::Tape t;
    BoundParams b(t, P, false);
    EXPECT_THROW(gen_block_forward(b, "blk", t.constant(Tensor({1, 4, 2})), t.constant(Tensor({1, 5, 2}))),
                 std::invalid_argument);
}

// ---- inference block ----------------------------------------------------------------

TEST(InfBlock, ResidualIdentity) {
    ParamStore P = block_params(&init_inf_block, 3, 4, 22);
    for (const char* n : {"blk.mix.W", "blk.mix.b", "blk.ln.g", "blk.ln.b"}) P.get(n).fill(0.0);
    Tensor x = random_tensor({2, 7, 3}, 23);
    Tensor y = eval(P, [&](ad::Tape& t, BoundParams& b) { return inf_block_forward(b, "blk", t.constant(x)); });
    EXPECT_EQ(max_abs_diff(y, x), 0.0);
}

TEST(InfBlock, MatchesRecurrence) {
    ParamStore P = block_params(&init_inf_block, 3, 5, 24);
    Tensor x = random_tensor({2, 11, 3}, 25);
    Tensor y = eval(P, [&](ad::Tape& t, BoundParams& b) { return inf_block_forward(b, "blk", t.constant(x)); });
    EXPECT_LT(max_abs_diff(y, test::inf_block_ref(P, "blk", x)), 1e-8);
}

// ---- heads ----------------------------------------------------------------------------

TEST(HeadStack, IdentityMixerSingleHead) {
    ParamStore P = block_params(&init_prior_block, 1, 4, 26);
    P.get("blk.mix.W").fill(1.0);
    P.get("blk.mix.b").fill(0.0);
    Tensor z = random_tensor({2, 6, 1}, 27);
    Tensor a = eval(P, [&](ad::Tape& t, BoundParams& b) { return headstack_forward(b, "blk", t.constant(z)); });
    Tensor r = eval(P, [&](ad::Tape& t, BoundParams& b) { return prior_layer_forward(b, "blk", t.constant(z)); });
    EXPECT_EQ(max_abs_diff(a, r), 0.0);
}

TEST(HeadStack, MatchesChannelLoop) {
    const std::size_t H = 3;
    ParamStore P = block_params(&init_prior_block, H, 4, 28);
    Tensor z = random_tensor({2, 8, H}, 29);
    Tensor out = eval(P, [&](ad::Tape& t, BoundParams& b) { return headstack_forward(b, "blk", t.constant(z)); });
    // Each channel through its own single-head layer, then the mixer.
    Tensor per(z.shape());
    for (std::size_t c = 0; c < H; ++c) {
        ParamStore one;
        auto pick = [&](const std::string& n) {
            const Tensor& src = P.get("blk." + n);
            const std::size_t row = src.size() / H;
            Shape s = src.shape();
            s[0] = 1;
            Tensor t(s);
            std::copy_n(src.data().begin() + static_cast<long>(c * row), row, t.data().begin());
            one.add("one." + n, t);
        };
        for (const char* n : {"A1", "A2", "E2", "C", "F"}) pick(n);
        Tensor zc({2, 8, 1});
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t l = 0; l < 8; ++l) zc.at(b, l, 0) = z.at(b, l, c);
        Tensor yc = eval(one, [&](ad::Tape& t, BoundParams& b) { return prior_layer_forward(b, "one", t.constant(zc)); });
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t l = 0; l < 8; ++l) per.at(b, l, c) = yc.at(b, l, 0);
    }
    const Tensor& W = P.get("blk.mix.W");
    const Tensor& bias = P.get("blk.mix.b");
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t l = 0; l < 8; ++l)
            for (std::size_t r = 0; r < H; ++r) {
                double s = bias[r];
                for (std::size_t c = 0; c < H; ++c) s += W.at(r, c) * per.at(b, l, c);
                EXPECT_NEAR(out.at(b, l, r), s, 1e-12);
            }
}

TEST(HeadStack, PermutationSymmetry) {
    const std::size_t H = 3;
    const std::vector<std::size_t> perm{2, 0, 1};
    ParamStore P = block_params(&init_prior_block, H, 3, 30);
    ParamStore Q;
    for (const auto& [name, t] : P.entries()) {
        Tensor u = t;
        if (name == "blk.mix.W") {
            for (std::size_t r = 0; r < H; ++r)
                for (std::size_t c = 0; c < H; ++c) u.at(r, c) = t.at(perm[r], perm[c]);
        } else {
            const std::size_t row = t.size() / H;
            for (std::size_t h = 0; h < H; ++h)
                std::copy_n(t.data().begin() + static_cast<long>(perm[h] * row), row,
                            u.data().begin() + static_cast<long>(h * row));
        }
        Q.add(name, u);
    }
    Tensor z = random_tensor({1, 7, H}, 31), zp(z.shape());
    for (std::size_t l = 0; l < 7; ++l)
        for (std::size_t h = 0; h < H; ++h) zp.at(0, l, h) = z.at(0, l, perm[h]);
    Tensor a = eval(P, [&](ad::Tape& t, BoundParams& b) { return headstack_forward(b, "blk", t.constant(z)); });
    Tensor c = eval(Q, [&](ad::Tape& t, BoundParams& b) { return headstack_forward(b, "blk", t.constant(zp)); });
    for (std::size_t l = 0; l < 7; ++l)
        for (std::size_t h = 0; h < H; ++h) EXPECT_NEAR(c.at(0, l, h), a.at(0, l, perm[h]), 1e-12);
}

TEST(HeadStack, ChannelMismatchThrows) {
    ParamStore P = block_params(&init_prior_block, 3, 3, 32);
    ad::Tape t;
    BoundParams b(t, P, false);
    EXPECT_THROW(headstack_forward(b, "blk", t.constant(Tensor({1, 4, 2}))), std::invalid_argument);
}

// ---- block conv/step agreement ---------------------------------------------------------

TEST(StepMode, BlocksMatchConvolution) {
    for (std::size_t L : {1, 5, 33, 64}) {
        ParamStore Pp = block_params(&init_prior_block, 3, 4, 40 + L);
        ParamStore Pg = block_params(&init_gen_block, 3, 4, 41 + L);
        ParamStore Pi = block_params(&init_inf_block, 3, 4, 42 + L);
        Tensor x = random_tensor({2, L, 3}, 43), z = random_tensor({2, L, 3}, 44);
        ad::Tape t;
        BoundParams bp(t, Pp, false), bg(t, Pg, false), bi(t, Pi, false);
        EXPECT_LT(max_abs_diff(prior_block_forward(bp, "blk", t.constant(z)).value(),
                               prior_block_stepwise(Pp, "blk", z)), 1e-6);
        auto [ox, oz] = gen_block_forward(bg, "blk", t.constant(x), t.constant(z));
        auto [sx, sz] = gen_block_stepwise(Pg, "blk", x, z);
        EXPECT_LT(max_abs_diff(ox.value(), sx), 1e-6);
        EXPECT_LT(max_abs_diff(oz.value(), sz), 1e-6);
        EXPECT_LT(max_abs_diff(inf_block_forward(bi, "blk", t.constant(x)).value(), inf_block_stepwise(Pi, "blk", x)),
                  1e-6);
    }
}

// ---- models ------------------------------------------------------------------------------

namespace {

struct ModelOut {
    Tensor prior_mu, prior_sigma, gen_mu, inf_mu, inf_sigma;
};

ModelOut run_models(const ParamStore& P, const ModelConfig& cfg, const Tensor& z, const Tensor& x,
                    const Tensor& mask) {
    ad::Tape t;
    BoundParams b(t, P, false);
    auto pr = prior_model_forward(b, cfg, t.constant(z));
    auto g = gen_model_forward(b, cfg, t.constant(z), t.constant(x));
    auto q = inf_model_forward(b, cfg, t.constant(x), t.constant(mask));
    return {pr.mu.value(), pr.sigma.value(), g.value(), q.mu.value(), q.sigma.value()};
}

}  // namespace

TEST(Models, ShapesAndPositivity) {
    ModelConfig cfg = tiny_config();
    cfg.x_dim = 2;
    ParamStore P = init_model(cfg, 1);
    Tensor z = random_tensor({3, 7, 2}, 1), x = random_tensor({3, 7, 2}, 2), m({3, 7, 2}, 1.0);
    auto o = run_models(P, cfg, z, x, m);
    EXPECT_EQ(o.prior_mu.shape(), z.shape());
    EXPECT_EQ(o.gen_mu.shape(), x.shape());
    EXPECT_EQ(o.inf_mu.shape(), (Shape{3, 7, 2}));
    for (double v : o.prior_sigma.data()) EXPECT_GT(v, 0.0);
    for (double v : o.inf_sigma.data()) EXPECT_GT(v, 0.0);
}

TEST(Models, CausalityByPerturbation) {
    for (bool uses_x : {false, true}) {
        ModelConfig cfg = tiny_config();
        cfg.decoder_uses_x = uses_x;
        for (unsigned seed = 0; seed < 5; ++seed) {
            ParamStore P = init_model(cfg, seed);
            test::jitter(P, seed + 100, 0.05);
            const std::size_t L = 9;
            Tensor z = random_tensor({1, L, 2}, seed + 1), x = random_tensor({1, L, 1}, seed + 2), m({1, L, 1}, 1.0);
            auto base = run_models(P, cfg, z, x, m);
            std::mt19937 rng(seed);
            for (int probe = 0; probe < 3; ++probe) {
                const std::size_t n = rng() % (L - 1);
                Tensor zp = z, xp = x;
                zp.at(0, n, 0) += 0.7;
                xp.at(0, n, 0) += 0.7;
                auto pz = run_models(P, cfg, zp, x, m);
                auto px = run_models(P, cfg, z, xp, m);
                for (std::size_t l = 0; l < L; ++l) {
                    for (std::size_t d = 0; d < 2; ++d) {
                        if (l <= n) EXPECT_NEAR(pz.prior_mu.at(0, l, d), base.prior_mu.at(0, l, d), kFlat);
                        if (l < n) EXPECT_NEAR(px.inf_mu.at(0, l, d), base.inf_mu.at(0, l, d), kFlat);
                    }
                    if (l < n) EXPECT_NEAR(pz.gen_mu.at(0, l, 0), base.gen_mu.at(0, l, 0), kFlat);
                    if (l <= n) EXPECT_NEAR(px.gen_mu.at(0, l, 0), base.gen_mu.at(0, l, 0), kFlat);
                }
                EXPECT_NE(pz.gen_mu.at(0, n, 0), base.gen_mu.at(0, n, 0));
                EXPECT_NE(px.inf_mu.at(0, n, 0), base.inf_mu.at(0, n, 0));
            }
        }
    }
}

TEST(Models, PriorDependsOnHistoryThroughStack) {
    // Each prior block delays its input by one step, so the influence of z_n reaches the
    // output after as many steps as there are blocks on the path.
    ModelConfig cfg = tiny_config();
    ParamStore P = init_model(cfg, 3);
    const std::size_t L = 10;
    Tensor z = random_tensor({1, L, 2}, 4), x({1, L, 1}), m({1, L, 1}, 1.0);
    auto base = run_models(P, cfg, z, x, m);
    Tensor zp = z;
    zp.at(0, 0, 0) += 1.0;
    auto pert = run_models(P, cfg, zp, x, m);
    bool changed = false;
    for (std::size_t l = 1; l < L; ++l) changed = changed || pert.prior_mu.at(0, l, 0) != base.prior_mu.at(0, l, 0);
    EXPECT_TRUE(changed);
}

TEST(Models, DecoderIgnoresXByDefault) {
    ModelConfig cfg = tiny_config();
    ParamStore P = init_model(cfg, 5);
    Tensor z = random_tensor({2, 6, 2}, 6), m({2, 6, 1}, 1.0);
    auto a = run_models(P, cfg, z, random_tensor({2, 6, 1}, 7), m);
    auto b = run_models(P, cfg, z, random_tensor({2, 6, 1}, 8), m);
    EXPECT_EQ(a.gen_mu.storage(), b.gen_mu.storage());
    EXPECT_FALSE(P.has("gen.enc_x.W"));
}

TEST(Models, SingleStepPriorIsFixedTransform) {
    ModelConfig cfg = tiny_config();
    ParamStore P = init_model(cfg, 9);
    Tensor m({1, 1, 1}, 1.0), x({1, 1, 1});
    auto a = run_models(P, cfg, random_tensor({1, 1, 2}, 10), x, m);
    auto b = run_models(P, cfg, random_tensor({1, 1, 2}, 11), x, m);
    EXPECT_EQ(a.prior_mu.storage(), b.prior_mu.storage());
    EXPECT_EQ(a.prior_sigma.storage(), b.prior_sigma.storage());
    PriorStepper st(P, cfg, 1);
    auto [mu0, s0] = st.peek();
    EXPECT_LT(max_abs_diff(mu0.reshaped({1, 1, 2}), a.prior_mu), 1e-12);
    EXPECT_LT(max_abs_diff(s0.reshaped({1, 1, 2}), a.prior_sigma), 1e-12);
}

TEST(Models, StepModeMatchesConvolution) {
    for (bool uses_x : {false, true}) {
        ModelConfig cfg = tiny_config();
        cfg.decoder_uses_x = uses_x;
        cfg.num_layers2 = 2;
        ParamStore P = init_model(cfg, 12);
        test::jitter(P, 13, 0.05);
        const std::size_t B = 2, L = 24;
        Tensor z = random_tensor({B, L, 2}, 14), x = random_tensor({B, L, 1}, 15);
        Tensor m = random_tensor({B, L, 1}, 16, 0.0, 1.0);
        for (auto& v : m.storage()) v = v > 0.3 ? 1.0 : 0.0;
        auto conv = run_models(P, cfg, z, x, m);
        PriorStepper ps(P, cfg, B);
        GenStepper gs(P, cfg, B);
        InfStepper is(P, cfg, B);
        double worst = 0;
        for (std::size_t l = 0; l < L; ++l) {
            Tensor zl({B, 2}), xl({B, 1}), ml({B, 1});
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t d = 0; d < 2; ++d) zl.at(b, d) = z.at(b, l, d);
                xl.at(b, 0) = x.at(b, l, 0);
                ml.at(b, 0) = m.at(b, l, 0);
            }
            auto peek = ps.peek();
            auto [pm, psg] = ps.step(zl);
            EXPECT_EQ(peek.first.storage(), pm.storage());
            Tensor gm = gs.step(zl, &xl);
            auto [qm, qs] = is.step(xl, ml);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t d = 0; d < 2; ++d) {
                    worst = std::max(worst, std::abs(pm.at(b, d) - conv.prior_mu.at(b, l, d)));
                    worst = std::max(worst, std::abs(psg.at(b, d) - conv.prior_sigma.at(b, l, d)));
                    worst = std::max(worst, std::abs(qm.at(b, d) - conv.inf_mu.at(b, l, d)));
                    worst = std::max(worst, std::abs(qs.at(b, d) - conv.inf_sigma.at(b, l, d)));
                }
                worst = std::max(worst, std::abs(gm.at(b, 0) - conv.gen_mu.at(b, l, 0)));
            }
        }
        EXPECT_LT(worst, 1e-6) << "decoder_uses_x=" << uses_x;
    }
}

TEST(Models, InferenceIsSinglePass) {
    // The recorded graph does not grow with the sequence length.
    ModelConfig cfg = tiny_config();
    ParamStore P = init_model(cfg, 17);
    auto nodes = [&](std::size_t L) {
        ad::Tape t;
        BoundParams b(t, P, false);
        inf_model_forward(b, cfg, t.constant(Tensor({1, L, 1})), t.constant(Tensor({1, L, 1}, 1.0)));
        return t.size();
    };
    EXPECT_EQ(nodes(8), nodes(256));
}

TEST(Models, AutoregressiveReductionMatchesPlainS4Stack) {
    ModelConfig cfg = tiny_config();
    cfg.decoder_uses_x = true;
    cfg.num_layers2 = 2;
    for (unsigned seed = 0; seed < 3; ++seed) {
        ParamStore P = init_model(cfg, 20 + seed);
        test::jitter(P, 30 + seed, 0.05);
        apply_autoregressive_reduction(P, cfg);
        Tensor x = random_tensor({2, 8, 1}, 40 + seed), m({2, 8, 1}, 1.0);
        Tensor z1 = random_tensor({2, 8, 2}, 50 + seed), z2 = random_tensor({2, 8, 2}, 60 + seed);
        auto a = run_models(P, cfg, z1, x, m);
        auto b = run_models(P, cfg, z2, x, m);
        EXPECT_LT(max_abs_diff(a.gen_mu, test::s4_stack_mean(P, cfg, x)), 1e-8);
        EXPECT_LT(max_abs_diff(a.gen_mu, b.gen_mu), 1e-12);
        for (double v : a.prior_mu.data()) EXPECT_EQ(v, 0.0);
        for (double v : a.prior_sigma.data()) EXPECT_NEAR(v, 1.0, 1e-15);
        for (double v : a.inf_mu.data()) EXPECT_EQ(v, 0.0);
        for (double v : a.inf_sigma.data()) EXPECT_NEAR(v, 1.0, 1e-15);
    }
    ModelConfig no_x = tiny_config();
    ParamStore P = init_model(no_x, 1);
    EXPECT_THROW(apply_autoregressive_reduction(P, no_x), std::invalid_argument);
}

// ---- gradients --------------------------------------------------------------------------

namespace {

using LossFn = std::function<ad::Var(ad::Tape&, BoundParams&)>;

// Analytic parameter gradients of `loss` against central differences, array by array.
void check_param_gradients(const ParamStore& P, const LossFn& loss) {
    ad::Tape tape;
    BoundParams bound(tape, P, true);
    tape.backward(loss(tape, bound));
    const ParamStore grads = bound.gradients();
    for (const auto& [name, value] : P.entries()) {
        auto f = [&, n = name](const Tensor& probe) {
            ParamStore moved = P;
            moved.get(n) = probe;
            ad::Tape t;
            BoundParams b(t, moved, false);
            return loss(t, b).value().item();
        };
        EXPECT_LT(ad::grad_check_against(f, value, grads.get(name)), 1e-4) << name;
    }
}

ad::Var probe_sum(ad::Var out, unsigned seed) {
    return ad::sum(ad::mul(out, out.tape().constant(random_tensor(out.shape(), seed))));
}

}  // namespace

TEST(Gradients, PriorBlock) {
    ParamStore P = block_params(&init_prior_block, 3, 4, 72);
    Tensor z = random_tensor({2, 6, 3}, 73);
    check_param_gradients(P, [&](ad::Tape& t, BoundParams& b) {
        return probe_sum(prior_block_forward(b, "blk", t.constant(z)), 74);
    });
}

TEST(Gradients, GenBlock) {
    ParamStore P = block_params(&init_gen_block, 3, 4, 75);
    Tensor x = random_tensor({2, 6, 3}, 76), z = random_tensor({2, 6, 3}, 77);
    check_param_gradients(P, [&](ad::Tape& t, BoundParams& b) {
        auto [ox, oz] = gen_block_forward(b, "blk", t.constant(x), t.constant(z));
        return ad::add(probe_sum(ox, 78), probe_sum(oz, 79));
    });
}

TEST(Gradients, InfBlock) {
    ParamStore P = block_params(&init_inf_block, 3, 4, 80);
    Tensor x = random_tensor({2, 6, 3}, 81);
    check_param_gradients(P, [&](ad::Tape& t, BoundParams& b) {
        return probe_sum(inf_block_forward(b, "blk", t.constant(x)), 82);
    });
}

TEST(Gradients, InputsThroughBlocks) {
    ParamStore P = block_params(&init_gen_block, 2, 3, 83);
    Tensor x = random_tensor({1, 5, 2}, 84), z = random_tensor({1, 5, 2}, 85);
    double ex = ad::grad_check(
        [&](ad::Tape& t, ad::Var v) {
            BoundParams b(t, P, false);
            auto [ox, oz] = gen_block_forward(b, "blk", v, t.constant(z));
            return ad::add(probe_sum(ox, 86), probe_sum(oz, 87));
        },
        x);
    double ez = ad::grad_check(
        [&](ad::Tape& t, ad::Var v) {
            BoundParams b(t, P, false);
            auto [ox, oz] = gen_block_forward(b, "blk", t.constant(x), v);
            return ad::add(probe_sum(ox, 86), probe_sum(oz, 87));
        },
        z);
    EXPECT_LT(ex, 1e-4);
    EXPECT_LT(ez, 1e-4);
}

TEST(Gradients, SmallModel) {
    ModelConfig cfg = tiny_config();
    cfg.H = 2;
    cfg.N = 2;
    cfg.decoder_uses_x = true;
    ParamStore P = init_model(cfg, 88);
    Tensor z = random_tensor({1, 4, 2}, 89), x = random_tensor({1, 4, 1}, 90), m({1, 4, 1}, 1.0);
    check_param_gradients(P, [&](ad::Tape& t, BoundParams& b) {
        auto pr = prior_model_forward(b, cfg, t.constant(z));
        auto g = gen_model_forward(b, cfg, t.constant(z), t.constant(x));
        auto q = inf_model_forward(b, cfg, t.constant(x), t.constant(m));
        ad::Var s = ad::add(probe_sum(pr.mu, 91), probe_sum(pr.sigma, 92));
        s = ad::add(s, probe_sum(g, 93));
        return ad::add(s, ad::add(probe_sum(q.mu, 94), probe_sum(q.sigma, 95)));
    });
}

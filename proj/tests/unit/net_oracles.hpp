#pragma once

// Independent per-position references for the LS4 layers, built from the single-SSM routines.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ls4/ls4net.hpp"
#include "ls4/params.hpp"
#include "ls4/ssm.hpp"

namespace ls4::test {

inline double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Eigen::MatrixXd head_matrix(const Tensor& A, std::size_t h) {
    const std::size_t n = A.dim(1);
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m(i, j) = A.at(h, i, j);
    return m;
}

inline Eigen::VectorXd head_vector(const Tensor& v, std::size_t h) {
    Eigen::VectorXd out(v.dim(1));
    for (std::size_t i = 0; i < v.dim(1); ++i) out(i) = v.at(h, i);
    return out;
}

inline ssm::DiscreteSSM head_ssm(const ParamStore& P, const std::string& A, const std::string& B,
                                 const std::string& E, std::size_t h, double delta = 1.0) {
    ssm::ContinuousSSM s;
    s.A = head_matrix(P.get(A), h);
    const auto n = s.A.rows();
    s.B = B.empty() ? Eigen::VectorXd::Zero(n) : head_vector(P.get(B), h);
    s.E = E.empty() ? Eigen::VectorXd::Zero(n) : head_vector(P.get(E), h);
    s.C = Eigen::RowVectorXd::Zero(n);
    s.h0 = Eigen::VectorXd::Zero(n);
    return ssm::discretize_bilinear(s, delta);
}

/// LayerNorm(W y + b) at one position.
inline std::vector<double> mix_norm_ref(const ParamStore& P, const std::string& mix, const std::string& ln,
                                        const std::vector<double>& y) {
    const Tensor& W = P.get(mix + ".W");
    const Tensor& b = P.get(mix + ".b");
    const std::size_t out = W.dim(0);
    std::vector<double> m(out);
    for (std::size_t r = 0; r < out; ++r) {
        m[r] = b[r];
        for (std::size_t c = 0; c < y.size(); ++c) m[r] += W.at(r, c) * y[c];
    }
    double mean = 0, var = 0;
    for (double v : m) mean += v;
    mean /= static_cast<double>(out);
    for (double v : m) var += (v - mean) * (v - mean);
    var /= static_cast<double>(out);
    const Tensor& g = P.get(ln + ".g");
    const Tensor& beta = P.get(ln + ".b");
    for (std::size_t r = 0; r < out; ++r) m[r] = (m[r] - mean) / std::sqrt(var + 1e-5) * g[r] + beta[r];
    return m;
}

inline double at_or_zero(const Tensor& seq, std::size_t b, long l, std::size_t c) {
    return l < 0 ? 0.0 : seq.at(b, static_cast<std::size_t>(l), c);
}

/// Prior layer: accumulate z over [0, n-1] with beta2, then one input-free step with beta1.
inline Tensor prior_layer_ref(const ParamStore& P, const std::string& p, const Tensor& z) {
    const std::size_t B = z.dim(0), L = z.dim(1), H = z.dim(2);
    const Tensor& C = P.get(p + ".C");
    const Tensor& F = P.get(p + ".F");
    Tensor y(z.shape());
    for (std::size_t h = 0; h < H; ++h) {
        auto d2 = head_ssm(P, p + ".A2", "", p + ".E2", h);
        auto d1 = head_ssm(P, p + ".A1", "", "", h);
        Eigen::RowVectorXd c = head_vector(C, h).transpose();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t n = 0; n < L; ++n) {
                Eigen::VectorXd s = Eigen::VectorXd::Zero(d2.Abar.rows());
                for (std::size_t j = 0; j < n; ++j) s = ssm::ssm_step(d2, s, 0.0, z.at(b, j, h));
                Eigen::VectorXd hn = ssm::ssm_step(d1, s, 0.0, 0.0);
                y.at(b, n, h) = gelu_ref(c.dot(hn) + F[h] * at_or_zero(z, b, static_cast<long>(n) - 1, h));
            }
    }
    return y;
}

inline Tensor prior_block_ref(const ParamStore& P, const std::string& p, const Tensor& z) {
    Tensor y = prior_layer_ref(P, p, z);
    Tensor out(z.shape());
    const std::size_t B = z.dim(0), L = z.dim(1), H = z.dim(2);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < L; ++n) {
            std::vector<double> row(H);
            for (std::size_t h = 0; h < H; ++h) row[h] = y.at(b, n, h);
            auto m = mix_norm_ref(P, p + ".mix", p + ".ln", row);
            for (std::size_t h = 0; h < H; ++h) out.at(b, n, h) = m[h] + at_or_zero(z, b, static_cast<long>(n) - 1, h);
        }
    return out;
}

/// Generative layer: beta4 over (x, z) on [0, n-1], then one beta3 step driven by z_{n-1}.
inline std::pair<Tensor, Tensor> gen_layer_ref(const ParamStore& P, const std::string& p, const Tensor& x,
                                               const Tensor& z) {
    const std::size_t B = z.dim(0), L = z.dim(1), H = z.dim(2);
    Tensor gx(z.shape()), gz(z.shape());
    for (std::size_t h = 0; h < H; ++h) {
        auto d4 = head_ssm(P, p + ".A4", p + ".B4", p + ".E4", h);
        auto d3 = head_ssm(P, p + ".A3", "", p + ".E3", h);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t n = 0; n < L; ++n) {
                Eigen::VectorXd s = Eigen::VectorXd::Zero(d4.Abar.rows());
                for (std::size_t j = 0; j < n; ++j) s = ssm::ssm_step(d4, s, x.at(b, j, h), z.at(b, j, h));
                const double zp = at_or_zero(z, b, static_cast<long>(n) - 1, h);
                const double xp = at_or_zero(x, b, static_cast<long>(n) - 1, h);
                Eigen::VectorXd hn = ssm::ssm_step(d3, s, 0.0, zp);
                for (const char* o : {"x", "z"}) {
                    const std::string so(o);
                    Eigen::RowVectorXd c = head_vector(P.get(p + ".C" + so), h).transpose();
                    const double v = gelu_ref(c.dot(hn) + P.get(p + ".D" + so)[h] * xp +
                                              P.get(p + ".F" + so)[h] * z.at(b, n, h));
                    (so == "x" ? gx : gz).at(b, n, h) = v;
                }
            }
    }
    return {gx, gz};
}

inline std::pair<Tensor, Tensor> gen_block_ref(const ParamStore& P, const std::string& p, const Tensor& x,
                                               const Tensor& z) {
    auto [gx, gz] = gen_layer_ref(P, p, x, z);
    Tensor ox(x.shape()), oz(z.shape());
    const std::size_t B = z.dim(0), L = z.dim(1), H = z.dim(2);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < L; ++n) {
            std::vector<double> rx(H), rz(H);
            for (std::size_t h = 0; h < H; ++h) {
                rx[h] = gx.at(b, n, h);
                rz[h] = gz.at(b, n, h);
            }
            auto mx = mix_norm_ref(P, p + ".mix_x", p + ".ln_x", rx);
            auto mz = mix_norm_ref(P, p + ".mix_z", p + ".ln_z", rz);
            for (std::size_t h = 0; h < H; ++h) {
                ox.at(b, n, h) = mx[h] + at_or_zero(x, b, static_cast<long>(n) - 1, h);
                oz.at(b, n, h) = mz[h] + z.at(b, n, h);
            }
        }
    return {ox, oz};
}

inline Tensor inf_block_ref(const ParamStore& P, const std::string& p, const Tensor& x) {
    const std::size_t B = x.dim(0), L = x.dim(1), H = x.dim(2);
    Tensor y(x.shape()), out(x.shape());
    for (std::size_t h = 0; h < H; ++h) {
        auto d5 = head_ssm(P, p + ".A5", p + ".B5", "", h);
        Eigen::RowVectorXd c = head_vector(P.get(p + ".C"), h).transpose();
        for (std::size_t b = 0; b < B; ++b) {
            Eigen::VectorXd s = Eigen::VectorXd::Zero(d5.Abar.rows());
            for (std::size_t n = 0; n < L; ++n) {
                s = ssm::ssm_step(d5, s, x.at(b, n, h), 0.0);
                y.at(b, n, h) = gelu_ref(c.dot(s) + P.get(p + ".D")[h] * x.at(b, n, h));
            }
        }
    }
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < L; ++n) {
            std::vector<double> row(H);
            for (std::size_t h = 0; h < H; ++h) row[h] = y.at(b, n, h);
            auto m = mix_norm_ref(P, p + ".mix", p + ".ln", row);
            for (std::size_t h = 0; h < H; ++h) out.at(b, n, h) = m[h] + x.at(b, n, h);
        }
    return out;
}

/// Perturbs every parameter so tests do not rely on the initial structure (identity norms, HiPPO pattern).
inline void jitter(ParamStore& P, unsigned seed, double scale = 0.1) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& [name, t] : P.entries())
        for (auto& v : t.storage()) v += u(rng);
}

// Tensor-level helpers for the plain S4 oracle below.
inline Tensor linear_seq(const ParamStore& P, const std::string& name, const Tensor& x, std::size_t in_begin = 0,
                  std::size_t in_count = 0) {
    const Tensor& W = P.get(name + ".W");
    const Tensor& b = P.get(name + ".b");
    const std::size_t B = x.dim(0), L = x.dim(1), out = W.dim(0);
    if (in_count == 0) in_count = W.dim(1);
    Tensor y({B, L, out});
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t r = 0; r < out; ++r) {
                double s = b[r];
                for (std::size_t c = 0; c < in_count; ++c) s += W.at(r, in_begin + c) * x.at(i, l, c);
                y.at(i, l, r) = s;
            }
    return y;
}

inline Tensor shift(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t b = 0; b < x.dim(0); ++b)
        for (std::size_t l = 1; l < x.dim(1); ++l)
            for (std::size_t c = 0; c < x.dim(2); ++c) y.at(b, l, c) = x.at(b, l - 1, c);
    return y;
}

inline Tensor add_seq(Tensor a, const Tensor& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}

inline Tensor layernorm_seq(const ParamStore& P, const std::string& name, const Tensor& x) {
    Tensor y(x.shape());
    const std::size_t C = x.dim(2);
    for (std::size_t b = 0; b < x.dim(0); ++b)
        for (std::size_t l = 0; l < x.dim(1); ++l) {
            double mean = 0, var = 0;
            for (std::size_t c = 0; c < C; ++c) mean += x.at(b, l, c);
            mean /= static_cast<double>(C);
            for (std::size_t c = 0; c < C; ++c) var += (x.at(b, l, c) - mean) * (x.at(b, l, c) - mean);
            var /= static_cast<double>(C);
            for (std::size_t c = 0; c < C; ++c)
                y.at(b, l, c) = (x.at(b, l, c) - mean) / std::sqrt(var + 1e-5) * P.get(name + ".g")[c] +
                                P.get(name + ".b")[c];
        }
    return y;
}

// One S4 block acting on the x stream: conv with C Abar3 Abar4^k Bbar4 on shifted input.
inline Tensor s4_block(const ParamStore& P, const std::string& p, const Tensor& x) {
    const std::size_t B = x.dim(0), L = x.dim(1), H = x.dim(2);
    Tensor xs = shift(x), y(x.shape());
    for (std::size_t h = 0; h < H; ++h) {
        auto d4 = head_ssm(P, p + ".A4", p + ".B4", "", h);
        auto d3 = head_ssm(P, p + ".A3", "", "", h);
        Eigen::RowVectorXd c = head_vector(P.get(p + ".Cx"), h).transpose() * d3.Abar;
        auto kernel = ssm::materialize_kernel(d4, c, L);
        for (std::size_t b = 0; b < B; ++b) {
            std::vector<double> in(L), zero(L, 0.0);
            for (std::size_t l = 0; l < L; ++l) in[l] = xs.at(b, l, h);
            auto out = ssm::ssm_conv_forward(kernel, in, zero, P.get(p + ".Dx")[h], 0.0);
            for (std::size_t l = 0; l < L; ++l) y.at(b, l, h) = gelu_ref(out[l]);
        }
    }
    Tensor out(x.shape());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l) {
            std::vector<double> row(H);
            for (std::size_t h = 0; h < H; ++h) row[h] = y.at(b, l, h);
            auto m = mix_norm_ref(P, p + ".mix_x", p + ".ln_x", row);
            for (std::size_t h = 0; h < H; ++h) out.at(b, l, h) = m[h] + xs.at(b, l, h);
        }
    return out;
}

// x half of a residual block on concat(z, x) whose cross weights are zero.
inline Tensor x_resblock(const ParamStore& P, const std::string& p, const Tensor& x) {
    const std::size_t w = x.dim(2);
    const Tensor& W1 = P.get(p + ".l1.W");
    const Tensor& b1 = P.get(p + ".l1.b");
    const Tensor& W2 = P.get(p + ".l2.W");
    const Tensor& b2 = P.get(p + ".l2.b");
    Tensor out(x.shape());
    for (std::size_t b = 0; b < x.dim(0); ++b)
        for (std::size_t l = 0; l < x.dim(1); ++l) {
            std::vector<double> hid(2 * w);
            for (std::size_t r = 0; r < 2 * w; ++r) {
                double s = b1[2 * w + r];
                for (std::size_t k = 0; k < w; ++k) s += W1.at(2 * w + r, w + k) * x.at(b, l, k);
                hid[r] = gelu_ref(s);
            }
            for (std::size_t r = 0; r < w; ++r) {
                double s = b2[w + r];
                for (std::size_t k = 0; k < 2 * w; ++k) s += W2.at(w + r, 2 * w + k) * hid[k];
                out.at(b, l, r) = x.at(b, l, r) + s;
            }
        }
    return out;
}

// Deep autoregressive S4 stack with the decoder's layout, x stream only.
inline Tensor s4_stack_mean(const ParamStore& P, const net::ModelConfig& cfg, const Tensor& x) {
    const std::string p = "gen.";
    Tensor v = linear_seq(P, p + "enc_x", shift(x));
    std::vector<Tensor> skips{v};
    for (std::size_t i = 0; i < cfg.num_layers1; ++i) {
        v = linear_seq(P, p + "down_x" + std::to_string(i), v);
        skips.push_back(v);
    }
    for (std::size_t j = 0; j < cfg.num_layers2; ++j) {
        const std::string q = p + "mid" + std::to_string(j);
        v = x_resblock(P, q + ".res", s4_block(P, q + ".block", v));
    }
    v = add_seq(v, skips.back());
    skips.pop_back();
    for (std::size_t i = 0; i < cfg.num_layers1; ++i) {
        v = linear_seq(P, p + "up_x" + std::to_string(i), v);
        for (std::size_t j = 0; j < cfg.num_layers2; ++j) {
            const std::string q = p + "up" + std::to_string(i) + "." + std::to_string(j);
            v = x_resblock(P, q + ".res", s4_block(P, q + ".block", v));
        }
        v = add_seq(v, skips.back());
        skips.pop_back();
    }
    v = layernorm_seq(P, p + "norm_x", v);
    return linear_seq(P, p + "out", v, 0, cfg.H);
}


}  // namespace ls4::test

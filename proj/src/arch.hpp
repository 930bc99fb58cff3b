#pragma once

// Stack layouts shared by the convolutional and the stepwise executors.

#include <string>
#include <utility>
#include <vector>

#include "ls4/ls4net.hpp"

namespace ls4::net::arch {

inline std::string idx(const std::string& base, std::size_t i) { return base + std::to_string(i); }

inline std::size_t level_width(const ModelConfig& cfg, std::size_t level) { return cfg.H << level; }

/// encode -> widening linears with skips -> blocks -> narrowing linears with blocks and skips -> norm -> out.
template <class Ex, class Block>
typename Ex::T single_stream(Ex& ex, const ModelConfig& cfg, const std::string& p, typename Ex::T v, Block block) {
    v = ex.linear(p + "enc", v);
    std::vector<typename Ex::T> skips{v};
    for (std::size_t i = 0; i < cfg.num_layers1; ++i) {
        v = ex.linear(idx(p + "down", i), v);
        skips.push_back(v);
    }
    for (std::size_t j = 0; j < cfg.num_layers2; ++j) {
        const std::string q = idx(p + "mid", j);
        v = block(q + ".block", v);
        v = ex.resblock(q + ".res", v);
    }
    v = ex.add(v, skips.back());
    skips.pop_back();
    for (std::size_t i = 0; i < cfg.num_layers1; ++i) {
        const std::string q = idx(p + "up", i);
        v = ex.linear(q, v);
        for (std::size_t j = 0; j < cfg.num_layers2; ++j) {
            const std::string r = q + "." + std::to_string(j);
            v = block(r + ".block", v);
            v = ex.resblock(r + ".res", v);
        }
        v = ex.add(v, skips.back());
        skips.pop_back();
    }
    v = ex.layernorm(p + "norm", v);
    return ex.linear(p + "out", v);
}

template <class Ex>
std::pair<typename Ex::T, typename Ex::T> prior(Ex& ex, const ModelConfig& cfg, typename Ex::T z) {
    const std::string p = "prior.";
    auto block = [&ex](const std::string& name, typename Ex::T v) { return ex.prior_block(name, v); };
    auto h = single_stream(ex, cfg, p, z, block);
    auto mu = ex.prior_block(p + "mu", h);
    auto sigma = ex.positive(ex.prior_block(p + "sigma", h));
    return {mu, sigma};
}

template <class Ex>
std::pair<typename Ex::T, typename Ex::T> inference(Ex& ex, const ModelConfig& cfg, typename Ex::T xm) {
    const std::string p = "inf.";
    auto block = [&ex](const std::string& name, typename Ex::T v) { return ex.inf_block(name, v); };
    auto h = single_stream(ex, cfg, p, xm, block);
    auto mu = ex.inf_block(p + "mu", h);
    auto sigma = ex.positive(ex.inf_block(p + "sigma", h));
    return {mu, sigma};
}

/// `x` must already be shifted by one step (or absent when the decoder ignores it).
template <class Ex>
typename Ex::T generative(Ex& ex, const ModelConfig& cfg, typename Ex::T z, typename Ex::T x_shifted) {
    const std::string p = "gen.";
    z = ex.linear(p + "enc_z", z);
    typename Ex::T x = cfg.decoder_uses_x ? ex.linear(p + "enc_x", x_shifted) : ex.bias_like(p + "enc_x", z);
    std::vector<typename Ex::T> skips_z{z}, skips_x{x};
    for (std::size_t i = 0; i < cfg.num_layers1; ++i) {
        z = ex.linear(idx(p + "down_z", i), z);
        x = ex.linear(idx(p + "down_x", i), x);
        skips_z.push_back(z);
        skips_x.push_back(x);
    }
    auto stage = [&](const std::string& q, std::size_t width) {
        auto [gx, gz] = ex.gen_block(q + ".block", x, z);
        auto zx = ex.resblock(q + ".res", ex.concat(gz, gx));
        z = ex.slice(zx, 0, width);
        x = ex.slice(zx, width, width);
    };
    for (std::size_t j = 0; j < cfg.num_layers2; ++j) stage(idx(p + "mid", j), level_width(cfg, cfg.num_layers1));
    z = ex.add(z, skips_z.back());
    x = ex.add(x, skips_x.back());
    skips_z.pop_back();
    skips_x.pop_back();
    for (std::size_t i = 0; i < cfg.num_layers1; ++i) {
        const std::string q = idx(p + "up", i);
        const std::size_t width = level_width(cfg, cfg.num_layers1 - i - 1);
        z = ex.linear(idx(p + "up_z", i), z);
        x = ex.linear(idx(p + "up_x", i), x);
        for (std::size_t j = 0; j < cfg.num_layers2; ++j) stage(q + "." + std::to_string(j), width);
        z = ex.add(z, skips_z.back());
        x = ex.add(x, skips_x.back());
        skips_z.pop_back();
        skips_x.pop_back();
    }
    x = ex.layernorm(p + "norm_x", x);
    z = ex.layernorm(p + "norm_z", z);
    return ex.linear(p + "out", ex.concat(x, z));
}

}  // namespace ls4::net::arch

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ls4/autodiff.hpp"
#include "ls4/params.hpp"
#include "ls4/tensor.hpp"

namespace ls4::net {

struct ModelConfig {
    std::size_t H = 64;
    std::size_t N = 64;
    std::size_t latent_dim = 5;
    std::size_t num_layers1 = 4;
    std::size_t num_layers2 = 4;
    std::size_t x_dim = 1;
    double sigma_x = 0.1;
    bool decoder_uses_x = false;
    double delta = 1.0;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Per-step diagonal Gaussian parameters, [B, L, d] each.
struct GaussianVars {
    ad::Var mu;
    ad::Var sigma;
};
struct GaussianSeq {
    Tensor mu;
    Tensor sigma;
};

constexpr double kSigmaFloor = 1e-4;

using Rng = std::mt19937_64;

// ---- parameter initialization ----------------------------------------------------

void init_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);
void init_layernorm(ParamStore& store, const std::string& prefix, std::size_t width);
void init_resblock(ParamStore& store, const std::string& prefix, std::size_t width, Rng& rng);
void init_prior_block(ParamStore& store, const std::string& prefix, std::size_t H, std::size_t N, Rng& rng);
void init_gen_block(ParamStore& store, const std::string& prefix, std::size_t H, std::size_t N, Rng& rng);
void init_inf_block(ParamStore& store, const std::string& prefix, std::size_t H, std::size_t N, Rng& rng);

/// Parameters of all three stacks under the prefixes "prior.", "gen." and "inf.".
ParamStore init_model(const ModelConfig& cfg, std::uint64_t seed);

// ---- layers and blocks (convolutional mode) --------------------------------------
//
// Sequences are [B, L, H]; each channel owns one SSM head.

/// y_n = GELU(C Abar1 (state over z_<n) + F z_{n-1}); [B, L, H] -> [B, L, H].
ad::Var prior_layer_forward(BoundParams& p, const std::string& prefix, ad::Var z, double delta = 1.0);
/// Per-channel prior layer followed by the channel-mixing linear map.
ad::Var headstack_forward(BoundParams& p, const std::string& prefix, ad::Var z, double delta = 1.0);
/// LayerNorm(G y + b) + shifted z.
ad::Var prior_block_forward(BoundParams& p, const std::string& prefix, ad::Var z, double delta = 1.0);

/// (g_x, g_z) before mixing.
std::pair<ad::Var, ad::Var> gen_layer_forward(BoundParams& p, const std::string& prefix, ad::Var x, ad::Var z,
                                              double delta = 1.0);
/// (x-stream, z-stream) block outputs.
std::pair<ad::Var, ad::Var> gen_block_forward(BoundParams& p, const std::string& prefix, ad::Var x, ad::Var z,
                                              double delta = 1.0);

ad::Var inf_layer_forward(BoundParams& p, const std::string& prefix, ad::Var x, double delta = 1.0);
ad::Var inf_block_forward(BoundParams& p, const std::string& prefix, ad::Var x, double delta = 1.0);

ad::Var resblock_forward(BoundParams& p, const std::string& prefix, ad::Var x);

// ---- model stacks -----------------------------------------------------------------

/// Autoregressive prior: position n depends on z_<n only.
GaussianVars prior_model_forward(BoundParams& p, const ModelConfig& cfg, ad::Var z);
/// Decoder mean. `x` is ignored (may be invalid) unless cfg.decoder_uses_x.
ad::Var gen_model_forward(BoundParams& p, const ModelConfig& cfg, ad::Var z, ad::Var x);
/// Posterior from zero-filled values and the observation mask, both [B, L, x_dim].
GaussianVars inf_model_forward(BoundParams& p, const ModelConfig& cfg, ad::Var x, ad::Var mask);

// ---- generation mode -------------------------------------------------------------

class StepState;

/// Stepwise prior: step(z_n) returns (mu, sigma) at position n, which never depends on z_n itself.
class PriorStepper {
public:
    PriorStepper(const ParamStore& params, const ModelConfig& cfg, std::size_t batch);
    PriorStepper(const PriorStepper&);
    PriorStepper& operator=(const PriorStepper&);
    ~PriorStepper();

    /// z_n: [B, latent_dim]. Returns [B, latent_dim] each.
    std::pair<Tensor, Tensor> step(const Tensor& z_n);
    /// Parameters at the current position without consuming an input.
    std::pair<Tensor, Tensor> peek() const;
    std::size_t position() const;

private:
    const ParamStore* params_;
    ModelConfig cfg_;
    std::unique_ptr<StepState> state_;
};

/// Stepwise decoder: step(z_n, x_n) returns mu_x at position n, which never depends on x_n.
class GenStepper {
public:
    GenStepper(const ParamStore& params, const ModelConfig& cfg, std::size_t batch);
    GenStepper(const GenStepper&);
    GenStepper& operator=(const GenStepper&);
    ~GenStepper();

    /// z_n: [B, latent_dim]; x_n: [B, x_dim] or nullptr when the decoder ignores x.
    Tensor step(const Tensor& z_n, const Tensor* x_n);
    /// mu_x at the current position given z_n, without consuming inputs.
    Tensor peek(const Tensor& z_n) const;
    std::size_t position() const;

private:
    const ParamStore* params_;
    ModelConfig cfg_;
    std::unique_ptr<StepState> state_;
};

class InfStepper {
public:
    InfStepper(const ParamStore& params, const ModelConfig& cfg, std::size_t batch);
    InfStepper(const InfStepper&);
    InfStepper& operator=(const InfStepper&);
    ~InfStepper();

    /// x_n, mask_n: [B, x_dim].
    std::pair<Tensor, Tensor> step(const Tensor& x_n, const Tensor& mask_n);

private:
    const ParamStore* params_;
    ModelConfig cfg_;
    std::unique_ptr<StepState> state_;
};

/// Single-block steppers used to check the convolutional forms.
Tensor prior_block_stepwise(const ParamStore& params, const std::string& prefix, const Tensor& z, double delta = 1.0);
std::pair<Tensor, Tensor> gen_block_stepwise(const ParamStore& params, const std::string& prefix, const Tensor& x,
                                             const Tensor& z, double delta = 1.0);
Tensor inf_block_stepwise(const ParamStore& params, const std::string& prefix, const Tensor& x, double delta = 1.0);

// ---- special configurations ------------------------------------------------------

/// Reconfigures the parameters so that the decoder ignores z (E and F paths and all z-to-x
/// cross weights zeroed) while the prior and posterior output standard normals.
/// Requires cfg.decoder_uses_x.
void apply_autoregressive_reduction(ParamStore& params, const ModelConfig& cfg);

}  // namespace ls4::net

#pragma once

#include <chrono>
#include <cstdint>
#include <random>
#include <vector>

#include <json.hpp>

#include "ls4/autodiff.hpp"
#include "ls4/checkpoint.hpp"
#include "ls4/ls4net.hpp"
#include "ls4/params.hpp"

namespace ls4::vae {

using net::ModelConfig;

/// Per-sequence sums averaged over the batch; elbo = recon - kl.
struct ElboReport {
    double recon = 0.0;
    double kl = 0.0;
    double elbo = 0.0;
};

// ---- densities ----------------------------------------------------------------------
//
// Inputs are [..., d]; outputs drop the trailing axis. An empty mask means fully observed.

/// Masked sum over d of log N(x; mu, sigma^2).
ad::Var gauss_log_prob(ad::Var x, ad::Var mu, ad::Var sigma, const Tensor& mask = {});
ad::Var gauss_log_prob(ad::Var x, ad::Var mu, double sigma, const Tensor& mask = {});

/// Sum over d of KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)); `step_mask` has the output shape.
ad::Var kl_diag_gauss(ad::Var mu_q, ad::Var sigma_q, ad::Var mu_p, ad::Var sigma_p, const Tensor& step_mask = {});

/// mu + sigma * eps.
ad::Var reparam_sample(ad::Var mu, ad::Var sigma, const Tensor& eps);

Tensor standard_normal(const Shape& shape, std::mt19937_64& rng);

// ---- bounds -------------------------------------------------------------------------

enum class KlEstimator { closed_form, sampled };

struct ElboTerms {
    ad::Var recon;
    ad::Var kl;
    ad::Var elbo;
};

/// Single-sample ELBO on a batch. x, mask: [B, L, x_dim]; eps: [B, L, latent_dim].
ElboTerms elbo_terms(BoundParams& p, const ModelConfig& cfg, const Tensor& x, const Tensor& mask, const Tensor& eps,
                     KlEstimator kl = KlEstimator::closed_form);
ElboReport elbo(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask,
                const Tensor& eps, KlEstimator kl = KlEstimator::closed_form);

/// Importance-weighted bound with one noise tensor per particle, averaged over the batch.
double iwae_bound(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask,
                  const std::vector<Tensor>& eps);
double iwae_bound(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask,
                  std::size_t particles, std::uint64_t seed);

// ---- optimization ---------------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    /// Global gradient-norm bound; <= 0 disables clipping.
    double clip_norm = 1.0;
    double ema_decay = 0.999;
    bool operator==(const AdamWConfig&) const = default;
};

struct OptimizerState {
    ParamStore m;
    ParamStore v;
    ParamStore ema;
    std::uint64_t step = 0;
};

OptimizerState init_optimizer(const ParamStore& params);
/// Rescales grads in place when their global norm exceeds max_norm; returns the norm before clipping.
double clip_global_norm(ParamStore& grads, double max_norm);
void adamw_step(ParamStore& params, const ParamStore& grads, OptimizerState& state, const AdamWConfig& cfg);
void ema_update(const ParamStore& params, OptimizerState& state, double decay);

// ---- training -------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    AdamWConfig opt;
    bool operator==(const TrainConfig&) const = default;
};

nlohmann::json train_config_to_json(const TrainConfig& t);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochRecord {
    std::size_t epoch = 0;
    ElboReport report;
    double ms = 0.0;
};

class Trainer {
public:
    Trainer(const ModelConfig& model, const TrainConfig& train, std::uint64_t init_seed);
    /// Resumes from a checkpoint written by checkpoint().
    explicit Trainer(const Checkpoint& ck);

    /// One pass over x/mask ([S, L, x_dim]) in a shuffled order drawn from (seed, epoch).
    EpochRecord run_epoch(const Tensor& x, const Tensor& mask);
    /// One optimizer update on a batch; returns the pre-update ELBO report.
    ElboReport train_step(const Tensor& x, const Tensor& mask, const Tensor& eps);

    Checkpoint checkpoint() const;
    const ParamStore& params() const { return params_; }
    const ParamStore& ema() const { return opt_.ema; }
    const ModelConfig& model_config() const { return model_; }
    const TrainConfig& train_config() const { return train_; }
    std::size_t epoch() const { return epoch_; }

private:
    ModelConfig model_;
    TrainConfig train_;
    ParamStore params_;
    OptimizerState opt_;
    std::size_t epoch_ = 0;
};

/// Parameters stored in a checkpoint, either the raw weights or their EMA.
ParamStore checkpoint_params(const Checkpoint& ck, bool use_ema);

// ---- sampling and tasks ---------------------------------------------------------------

struct GenerateOptions {
    bool sample_z = true;
    bool sample_x = true;
};

struct Generated {
    Tensor x;     // [n, L, x_dim]
    Tensor z;     // [n, L, latent_dim]
    Tensor mu_x;  // decoder means along the generated path
};

Generated generate(const ParamStore& params, const ModelConfig& cfg, std::size_t n, std::size_t length,
                   std::uint64_t seed, GenerateOptions opts = {});

/// Decoder means at every position from posterior mean latents.
Tensor interpolate(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask);
/// Observation samples [S, B, L, x_dim] from sampled posterior latents.
Tensor interpolate_samples(const ParamStore& params, const ModelConfig& cfg, const Tensor& x, const Tensor& mask,
                           std::size_t samples, std::uint64_t seed);

struct Extrapolation {
    Tensor mean;     // [B, horizon, x_dim], mean latents and means fed forward
    Tensor samples;  // [S, B, horizon, x_dim], sampled latents and observations
};

Extrapolation extrapolate(const ParamStore& params, const ModelConfig& cfg, const Tensor& x_first,
                          std::size_t horizon, std::size_t samples, std::uint64_t seed);

}  // namespace ls4::vae

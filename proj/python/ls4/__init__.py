"""LS4 latent state-space generative models for time series (C++ core)."""

from ._core import (
    Model,
    Trainer,
    bench,
    causal_conv,
    crps,
    flame,
    hippo,
    kl_gauss,
    marginal_score,
    mse,
    normalize_per_sequence,
    ssm_forward,
)

__all__ = [
    "Model",
    "Trainer",
    "bench",
    "causal_conv",
    "crps",
    "flame",
    "hippo",
    "kl_gauss",
    "marginal_score",
    "mse",
    "normalize_per_sequence",
    "ssm_forward",
]

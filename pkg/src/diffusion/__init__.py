from .inversion import InversionTrajectory, UncondEmbeddingSet, ddim_invert, learn_null_embeddings, reconstruct
from .schedule import (
    LatentState,
    NoiseSchedule,
    build_schedule,
    ddim_invert_step,
    ddim_sample_step,
    ddpm_posterior_mean,
    ddpm_sample_step,
    forward_marginal,
    schedule_from_alpha_bars,
)

__all__ = [
    "InversionTrajectory",
    "LatentState",
    "NoiseSchedule",
    "UncondEmbeddingSet",
    "build_schedule",
    "ddim_invert",
    "ddim_invert_step",
    "ddim_sample_step",
    "ddpm_posterior_mean",
    "ddpm_sample_step",
    "forward_marginal",
    "learn_null_embeddings",
    "reconstruct",
    "schedule_from_alpha_bars",
]

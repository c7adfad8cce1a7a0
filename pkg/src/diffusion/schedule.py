"""Noise schedules and closed-form diffusion steps.

Pure arithmetic: no model is evaluated here. Schedule math runs in float64;
step coefficients are Python floats so latents of any float dtype can flow
through (and keep their autograd graph).

Index convention: ``alpha_bars[0] == 1`` so timestep 0 is the clean latent,
``betas[t - 1]`` is beta_t for t in [1, T].
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

from src.exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

SCHEDULE_FAMILIES = ("linear", "scaled_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    family: str
    num_steps: int
    beta_min: float
    beta_max: float
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    train_steps: int | None = None
    model_timesteps: tuple[int, ...] = field(default=(), repr=False)

    def alpha_bar(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alpha_bars[t])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.num_steps:
            raise ConfigError(f"beta_t defined for t in [1, {self.num_steps}], got {t}")
        return float(self.betas[t - 1])

    def model_timestep(self, t: int) -> int:
        """Timestep handed to the denoiser for inference index ``t``."""
        self.check_timestep(t)
        if self.model_timesteps:
            return self.model_timesteps[t]
        return t

    def check_timestep(self, t: int) -> None:
        if not 0 <= t <= self.num_steps:
            raise ConfigError(f"Timestep {t} outside [0, {self.num_steps}]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "T": self.num_steps,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "train_steps": self.train_steps,
            "alpha_bars": [float(a) for a in self.alpha_bars],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "NoiseSchedule":
        if doc.get("family") == "custom":
            return schedule_from_alpha_bars(doc["alpha_bars"])
        sched = build_schedule(
            int(doc["T"]),
            float(doc["beta_min"]),
            float(doc["beta_max"]),
            doc["family"],
            train_steps=doc.get("train_steps"),
        )
        stored = doc.get("alpha_bars")
        if stored is not None and not np.array_equal(np.asarray(stored, dtype=np.float64), sched.alpha_bars):
            raise ConfigError("Stored alpha_bars do not match the rebuilt schedule")
        return sched


def _family_betas(n: int, beta_min: float, beta_max: float, family: str) -> np.ndarray:
    if family == "linear":
        return np.linspace(beta_min, beta_max, n, dtype=np.float64)
    # scaled_linear: interpolate sqrt(beta) linearly, then square
    return np.linspace(math.sqrt(beta_min), math.sqrt(beta_max), n, dtype=np.float64) ** 2


def _validated(alpha_bars: np.ndarray) -> np.ndarray:
    if alpha_bars[0] != 1.0:
        raise ConfigError("alpha_bars[0] must be 1")
    if np.any(alpha_bars <= 0) or np.any(alpha_bars > 1) or not np.all(np.isfinite(alpha_bars)):
        raise ConfigError("alpha_bars must lie in (0, 1]")
    if np.any(np.diff(alpha_bars) >= 0):
        raise ConfigError("alpha_bars must be strictly decreasing")
    return alpha_bars


def build_schedule(
    T: int,
    beta_min: float,
    beta_max: float,
    family: str = "scaled_linear",
    train_steps: int | None = None,
) -> NoiseSchedule:
    """Build a T-step schedule.

    With ``train_steps`` set, betas are laid out over the training horizon and
    inference step i maps to training step ``i * (train_steps // T)``; the
    returned betas are the effective per-inference-step values
    ``1 - alpha_bar_i / alpha_bar_{i-1}``.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigError(f"Need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if family not in SCHEDULE_FAMILIES:
        raise ConfigError(f"Unknown schedule family {family!r}; expected one of {SCHEDULE_FAMILIES}")

    if train_steps is None:
        betas = _family_betas(T, beta_min, beta_max, family)
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return NoiseSchedule(family, int(T), beta_min, beta_max, betas, _validated(alpha_bars))

    if train_steps < T:
        raise ConfigError(f"train_steps ({train_steps}) must be >= T ({T})")
    train_betas = _family_betas(train_steps, beta_min, beta_max, family)
    train_alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - train_betas)])
    stride = train_steps // T
    model_timesteps = tuple(i * stride for i in range(T + 1))
    alpha_bars = train_alpha_bars[list(model_timesteps)]
    betas = 1.0 - alpha_bars[1:] / alpha_bars[:-1]
    logger.debug("Subsampled %d-step schedule to %d steps (stride %d)", train_steps, T, stride)
    return NoiseSchedule(
        family, int(T), beta_min, beta_max, betas, _validated(alpha_bars), int(train_steps), model_timesteps
    )


def schedule_from_alpha_bars(alpha_bars) -> NoiseSchedule:
    """Schedule defined directly by its cumulative products (alpha_bars[0] must be 1)."""
    ab = _validated(np.asarray(alpha_bars, dtype=np.float64))
    betas = 1.0 - ab[1:] / ab[:-1]
    return NoiseSchedule("custom", len(ab) - 1, float(betas.min()), float(betas.max()), betas, ab)


# Latent states and step operations
# ---------------------------------------------------------------------------


@dataclass
class LatentState:
    values: torch.Tensor
    timestep: int

    def detached(self) -> "LatentState":
        return LatentState(self.values.detach().clone(), self.timestep)


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(b.shape)} does not match latent shape {tuple(a.shape)}")


def forward_marginal(z0: LatentState, t: int, noise: torch.Tensor, sched: NoiseSchedule) -> LatentState:
    """Sample z_t directly from z_0: sqrt(abar_t) z0 + sqrt(1 - abar_t) noise."""
    _check_shapes(z0.values, noise, "forward_marginal")
    a_t = sched.alpha_bar(t)
    return LatentState(math.sqrt(a_t) * z0.values + math.sqrt(1.0 - a_t) * noise, t)


def _ddim_coefficients(a_from: float, a_to: float) -> tuple[float, float]:
    scale = math.sqrt(a_to / a_from)
    eps_coef = math.sqrt(a_to) * (math.sqrt(1.0 / a_to - 1.0) - math.sqrt(1.0 / a_from - 1.0))
    return scale, eps_coef


def ddim_invert_step(z_t: LatentState, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> LatentState:
    """One DDIM inversion step, t -> t + 1."""
    if not 0 <= t <= sched.num_steps - 1:
        raise ConfigError(f"ddim_invert_step needs t in [0, {sched.num_steps - 1}], got {t}")
    _check_shapes(z_t.values, eps, "ddim_invert_step")
    scale, eps_coef = _ddim_coefficients(sched.alpha_bar(t), sched.alpha_bar(t + 1))
    return LatentState(scale * z_t.values + eps_coef * eps, t + 1)


def ddim_sample_step(z_t: LatentState, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> LatentState:
    """One deterministic DDIM sampling step, t -> t - 1."""
    if not 1 <= t <= sched.num_steps:
        raise ConfigError(f"ddim_sample_step needs t in [1, {sched.num_steps}], got {t}")
    _check_shapes(z_t.values, eps, "ddim_sample_step")
    scale, eps_coef = _ddim_coefficients(sched.alpha_bar(t), sched.alpha_bar(t - 1))
    return LatentState(scale * z_t.values + eps_coef * eps, t - 1)


def ddim_coefficients(t_from: int, t_to: int, sched: NoiseSchedule) -> tuple[float, float]:
    """(latent scale, eps coefficient) of the DDIM update between two timesteps."""
    return _ddim_coefficients(sched.alpha_bar(t_from), sched.alpha_bar(t_to))


def ddpm_posterior_mean(z_t: torch.Tensor, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    if t == 0:
        raise ConfigError("Posterior mean is undefined at t = 0")
    _check_shapes(z_t, eps, "ddpm_posterior_mean")
    beta_t = sched.beta(t)
    a_bar = sched.alpha_bar(t)
    return (z_t - (beta_t / math.sqrt(1.0 - a_bar)) * eps) / math.sqrt(1.0 - beta_t)


def ddpm_sample_step(
    z_t: LatentState,
    eps: torch.Tensor,
    t: int,
    sigma_t: float,
    noise: torch.Tensor,
    sched: NoiseSchedule,
) -> LatentState:
    """Stochastic ancestral step: posterior mean plus sigma_t * noise."""
    if sigma_t < 0:
        raise ConfigError(f"sigma_t must be non-negative, got {sigma_t}")
    _check_shapes(z_t.values, noise, "ddpm_sample_step")
    mean = ddpm_posterior_mean(z_t.values, eps, t, sched)
    return LatentState(mean + sigma_t * noise, t - 1)

"""DDIM inversion and per-timestep unconditional-embedding learning.

Stage 1 of the protection pipeline: invert the clean latent for ``t_start``
steps with the null embedding, then walk back down learning one embedding per
timestep so that sampling from z_{t_start} retraces the inversion path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import torch
from tqdm import tqdm

from src.backends.base import DenoiserBackend, UncondEmbedding
from src.config import SHOW_PROGRESS
from src.diffusion.schedule import LatentState, NoiseSchedule, ddim_coefficients, ddim_invert_step, ddim_sample_step
from src.exceptions import ConfigError, NonFiniteError

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "sgd")


@dataclass
class InversionTrajectory:
    latents: list[LatentState]
    null_embedding: UncondEmbedding

    @property
    def t_start(self) -> int:
        return len(self.latents) - 1

    def latent_at(self, t: int) -> torch.Tensor:
        return self.latents[t].values


@dataclass
class UncondEmbeddingSet:
    embeddings: dict[int, UncondEmbedding]
    # z_bar_{t_start}, ..., z_bar_0
    bar_latents: list[LatentState]
    loss_curves: dict[int, list[float]] = field(default_factory=dict)

    @property
    def t_start(self) -> int:
        return self.bar_latents[0].timestep

    @property
    def timesteps(self) -> list[int]:
        return list(range(self.t_start, 0, -1))

    def embedding_at(self, t: int) -> torch.Tensor:
        return self.embeddings[t].values

    def bar_latent_at(self, t: int) -> LatentState:
        return self.bar_latents[self.t_start - t]

    @property
    def final_latent(self) -> LatentState:
        return self.bar_latents[-1]


def build_optimizer(name: str, params: Iterable[torch.Tensor], lr: float) -> torch.optim.Optimizer:
    if name == "adamw":
        return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=0.0)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ConfigError(f"Unknown optimizer {name!r}; expected one of {OPTIMIZERS}")


def check_finite(stage: str, values: torch.Tensor, step: int) -> None:
    if not torch.isfinite(values).all():
        norm = float(torch.linalg.vector_norm(values.detach().double().nan_to_num(posinf=1e308, neginf=-1e308)))
        raise NonFiniteError(stage, step, norm)


def denoise_step(backend: DenoiserBackend, sched: NoiseSchedule, z: LatentState, e: torch.Tensor) -> LatentState:
    """Predict eps at (z, t, e) and take one DDIM sampling step t -> t - 1."""
    eps = backend.predict_noise(z.values, sched.model_timestep(z.timestep), e)
    return ddim_sample_step(z, eps, z.timestep, sched)


def ddim_invert(
    z0: LatentState,
    t_start: int,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    null_embedding: UncondEmbedding | None = None,
) -> InversionTrajectory:
    """Apply DDIM inversion t_start times from the clean latent, recording every z_t."""
    if z0.timestep != 0:
        raise ConfigError(f"Inversion starts from a clean latent (timestep 0), got {z0.timestep}")
    if not 1 <= t_start <= sched.num_steps:
        raise ConfigError(f"t_start must lie in [1, {sched.num_steps}], got {t_start}")
    check_finite("ddim_invert", z0.values, 0)

    null = null_embedding or backend.null_embedding()
    z = z0.detached()
    latents = [z]
    with torch.no_grad():
        for t in range(t_start):
            eps = backend.predict_noise(z.values, sched.model_timestep(t), null.values)
            z = ddim_invert_step(z, eps, t, sched)
            check_finite("ddim_invert", z.values, t + 1)
            latents.append(z)
    logger.debug("Inverted to t=%d (|z|=%.4g)", t_start, float(torch.linalg.vector_norm(z.values)))
    return InversionTrajectory(latents, null.detached())


def reconstruction_loss(
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    z_bar: LatentState,
    e: torch.Tensor,
    target: torch.Tensor,
) -> torch.Tensor:
    """||z_{t-1} - DDIM(z_bar_t, eps(z_bar_t, t, e))||^2 for one timestep."""
    pred = denoise_step(backend, sched, z_bar, e)
    return ((pred.values - target) ** 2).sum()


def embedding_lipschitz(backend, sched: NoiseSchedule, t: int) -> float:
    """Gradient Lipschitz constant of the timestep-t reconstruction loss in e.

    Needs a backend exposing exact Jacobians (the toy backend): the loss is
    ||k B_t e - r||^2 so L = 2 k^2 ||B_t||_2^2.
    """
    _, eps_coef = ddim_coefficients(t, t - 1, sched)
    _, b = backend.jacobians(sched.model_timestep(t))
    return 2.0 * eps_coef**2 * float(torch.linalg.matrix_norm(b, ord=2)) ** 2


def learn_null_embeddings(
    traj: InversionTrajectory,
    iters: int,
    lr: float,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    *,
    start: int | None = None,
    optimizer: str = "adamw",
    warm_start: bool = True,
    early_stop: float = 1e-5,
    keep_best: bool = True,
    progress: bool | None = None,
) -> UncondEmbeddingSet:
    """Learn one unconditional embedding per timestep, from ``start`` down to 1.

    Each timestep runs ``iters`` optimizer steps on the reconstruction loss
    against the stored inversion latent z_{i-1}, then commits z_bar_{i-1} by
    sampling with the chosen embedding. The loss curve per timestep holds the
    initial evaluation plus one entry per step.
    """
    start = traj.t_start if start is None else start
    if not 1 <= start <= traj.t_start:
        raise ConfigError(f"Embedding learning needs 1 <= start <= {traj.t_start}, got {start}")
    if iters < 0 or lr < 0:
        raise ConfigError("iters and lr must be non-negative")
    show = SHOW_PROGRESS if progress is None else progress

    null = traj.null_embedding.values.detach()
    current = null.clone()
    z_bar = traj.latents[start].detached()
    bar_latents = [z_bar]
    embeddings: dict[int, UncondEmbedding] = {}
    curves: dict[int, list[float]] = {}

    for i in tqdm(range(start, 0, -1), desc="null-text", disable=not show, leave=False):
        init = current if warm_start else null
        e = init.clone().requires_grad_(True)
        opt = build_optimizer(optimizer, [e], lr)
        target = traj.latents[i - 1].values.detach()
        curve: list[float] = []
        best_loss, best_e = math.inf, init.clone()

        for k in range(iters + 1):
            loss = reconstruction_loss(backend, sched, z_bar, e, target)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError("null-text", i, value, f"iteration {k}")
            curve.append(value)
            if value < best_loss:
                best_loss, best_e = value, e.detach().clone()
            if k == iters or value < early_stop:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()

        chosen = best_e if keep_best else e.detach().clone()
        with torch.no_grad():
            z_bar = denoise_step(backend, sched, z_bar, chosen)
        check_finite("null-text", z_bar.values, i - 1)
        embeddings[i] = UncondEmbedding(chosen, i)
        curves[i] = curve
        bar_latents.append(z_bar)
        current = chosen
        logger.debug("t=%d: loss %.3e -> %.3e in %d evals", i, curve[0], curve[-1], len(curve))

    logger.info("Learned %d unconditional embeddings (final loss %.3e)", len(embeddings), curves[1][-1])
    return UncondEmbeddingSet(embeddings, bar_latents, curves)


def reconstruct(emb_set: UncondEmbeddingSet, codec) -> torch.Tensor:
    """Decode z_bar_0, clamped to the valid pixel range."""
    return codec.decode(emb_set.final_latent.values).clamp(0.0, 1.0)

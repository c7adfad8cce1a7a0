"""Two-stage protection pipeline.

Stage 1 inverts the source latent and learns per-timestep unconditional
embeddings (then frozen). Stage 2 optimizes the adversarial latent z_adv
through the full sampling chain, decoder and surrogate extractors on
``lambda_adv * L_adv + L_str``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any

import torch
from tqdm import tqdm

from src.backends.base import DenoiserBackend, LatentCodec
from src.config import FEATURE_CACHE_DIR, SHOW_PROGRESS, config_digest
from src.diffusion.inversion import (
    OPTIMIZERS,
    InversionTrajectory,
    UncondEmbeddingSet,
    build_optimizer,
    ddim_invert,
    denoise_step,
    learn_null_embeddings,
    reconstruct,
)
from src.diffusion.schedule import SCHEDULE_FAMILIES, LatentState, NoiseSchedule, build_schedule
from src.exceptions import ConfigError, NonFiniteError
from src.guidance.attention import (
    AttentionMapSet,
    capture_filtered,
    record_reference_maps,
    resolve_site_filter,
    structure_loss,
)
from src.recognition.surrogates import FeatureCache, SurrogateEnsemble, adversarial_loss, obfuscation_terms

logger = logging.getLogger(__name__)

MODES = ("impersonate", "obfuscate_impersonate")


@dataclass
class ProtectionConfig:
    T: int = 20
    t_start: int = 3
    null_iters: int = 20
    null_lr: float = 0.1
    adv_iters: int = 35
    adv_lr: float = 0.01
    lambda_adv: float = 0.003
    mode: str = "impersonate"
    w_obf: float = 1.0
    multi_timestep: bool = False
    seed: int = 0

    schedule_family: str = "scaled_linear"
    beta_min: float = 0.00085
    beta_max: float = 0.012
    train_steps: int | None = 1000

    optimizer: str = "adamw"
    warm_start: bool = True
    null_early_stop: float = 1e-5
    use_null_embeddings: bool = True
    use_structure_loss: bool = True
    structure_reduction: str = "mean"
    site_filter: list[str] | None = None
    full_inversion: bool = False
    keep_best: bool = False
    multi_timesteps: list[int] | None = None

    def __post_init__(self):
        if not 1 <= self.t_start <= self.T:
            raise ConfigError(f"Need 1 <= t_start <= T, got t_start={self.t_start}, T={self.T}")
        for name in ("null_iters", "null_lr", "adv_iters", "adv_lr", "lambda_adv", "w_obf", "null_early_stop"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.mode not in MODES:
            raise ConfigError(f"Unknown mode {self.mode!r}; expected one of {MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.schedule_family not in SCHEDULE_FAMILIES:
            raise ConfigError(f"Unknown schedule family {self.schedule_family!r}")
        if self.structure_reduction not in ("mean", "sum"):
            raise ConfigError(f"Unknown structure reduction {self.structure_reduction!r}")
        if self.multi_timesteps is not None:
            bad = [i for i in self.multi_timesteps if not 1 <= i <= self.t_start]
            if bad or not self.multi_timesteps:
                raise ConfigError(f"multi_timesteps must be a non-empty subset of [1, {self.t_start}]")

    @classmethod
    def for_toy(cls, **overrides: Any) -> "ProtectionConfig":
        """Native 20-step linear schedule matching the toy backend's timestep range.

        The toy inversion residuals are small, so embedding learning uses a
        lower rate than the latent-diffusion default.
        """
        base: dict[str, Any] = {
            "schedule_family": "linear",
            "beta_min": 0.01,
            "beta_max": 0.2,
            "train_steps": None,
            "null_lr": 1e-3,
        }
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ProtectionConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"Unknown protection config keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes: Any) -> "ProtectionConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_min, self.beta_max, self.schedule_family, self.train_steps)

    def optimized_timesteps(self) -> list[int]:
        if not self.multi_timestep:
            return [self.t_start]
        chosen = self.multi_timesteps or list(range(self.t_start, 0, -1))
        return sorted(set(chosen), reverse=True)


@dataclass
class ProtectionContext:
    """Stage-1 products shared by every stage-2 evaluation."""

    config: ProtectionConfig
    schedule: NoiseSchedule
    source: torch.Tensor
    trajectory: InversionTrajectory
    embeddings: UncondEmbeddingSet
    reference: AttentionMapSet
    reconstruction: torch.Tensor

    @property
    def start_latent(self) -> torch.Tensor:
        return self.trajectory.latent_at(self.config.t_start)


@dataclass
class LossTerms:
    total: torch.Tensor
    adv: torch.Tensor
    structure: torch.Tensor
    impersonation: torch.Tensor | None = None
    obfuscation: torch.Tensor | None = None


@dataclass
class ProtectedResult:
    protected_image: torch.Tensor
    final_latent: LatentState
    loss_curves: dict[str, list[float]]
    reference_digest: str
    config: dict[str, Any]
    embeddings: UncondEmbeddingSet
    reconstruction: torch.Tensor
    selected_iteration: int
    residuals: dict[int, torch.Tensor] = field(default_factory=dict)
    grad_norms: dict[int, list[float]] = field(default_factory=dict)
    wall_clock_s: float = 0.0


@dataclass
class Protector:
    backend: DenoiserBackend
    codec: LatentCodec
    ensemble: SurrogateEnsemble
    config: ProtectionConfig = field(default_factory=ProtectionConfig)
    cache: FeatureCache = field(default_factory=lambda: FeatureCache(FEATURE_CACHE_DIR))
    progress: bool = SHOW_PROGRESS

    # Stage 1
    # -----------------------------------------------------------------------

    def prepare(self, x: torch.Tensor) -> ProtectionContext:
        cfg = self.config
        sched = cfg.schedule()
        z0 = LatentState(self.codec.encode(x), 0)
        depth = sched.num_steps if cfg.full_inversion else cfg.t_start
        traj = ddim_invert(z0, depth, self.backend, sched)
        iters = cfg.null_iters if cfg.use_null_embeddings else 0
        emb = learn_null_embeddings(
            traj,
            iters,
            cfg.null_lr,
            self.backend,
            sched,
            start=cfg.t_start,
            optimizer=cfg.optimizer,
            warm_start=cfg.warm_start,
            early_stop=cfg.null_early_stop,
            progress=self.progress,
        )
        ref = record_reference_maps(emb, self.backend, sched, cfg.site_filter)
        recon = reconstruct(emb, self.codec)
        return ProtectionContext(cfg, sched, x.detach(), traj, emb, ref, recon)

    # Stage 2
    # -----------------------------------------------------------------------

    def sample_path(
        self,
        ctx: ProtectionContext,
        z_start: torch.Tensor,
        residuals: dict[int, torch.Tensor] | None = None,
        capture: bool = True,
    ) -> tuple[torch.Tensor, AttentionMapSet, LatentState]:
        """Run DDIM sampling from z_start with the frozen embeddings.

        Returns the clamped decoded image, the attention maps captured at every
        step input, and the final latent. ``residuals[i]`` is added to the
        chain latent right before step i consumes it.
        """
        keep = resolve_site_filter(ctx.config.site_filter)
        maps = AttentionMapSet()
        z = LatentState(z_start, ctx.config.t_start)
        for i in ctx.embeddings.timesteps:
            if residuals and i in residuals:
                z = LatentState(z.values + residuals[i], i)
            e = ctx.embeddings.embedding_at(i)
            if capture:
                maps.add(i, capture_filtered(self.backend, z.values, ctx.schedule.model_timestep(i), e, keep))
            z = denoise_step(self.backend, ctx.schedule, z, e)
        image = self.codec.decode(z.values).clamp(0.0, 1.0)
        return image, maps, z

    def objective(
        self,
        ctx: ProtectionContext,
        target: torch.Tensor,
        z_start: torch.Tensor,
        residuals: dict[int, torch.Tensor] | None = None,
        obfuscate: bool = False,
    ) -> LossTerms:
        """lambda_adv * L_adv + L_str at the given latent(s)."""
        cfg = ctx.config
        image, maps, _ = self.sample_path(ctx, z_start, residuals)
        imp = obf = None
        if obfuscate:
            imp, obf = obfuscation_terms(image, ctx.source, target, self.ensemble, self.cache)
            adv = imp - cfg.w_obf * obf
        else:
            adv = adversarial_loss(image, target, self.ensemble, self.cache)
        struct = structure_loss(maps, ctx.reference, cfg.structure_reduction)
        total = cfg.lambda_adv * adv + (struct if cfg.use_structure_loss else 0.0)
        return LossTerms(total, adv, struct, imp, obf)

    def optimize(
        self,
        ctx: ProtectionContext,
        target: torch.Tensor,
        timesteps: list[int],
        obfuscate: bool = False,
    ) -> ProtectedResult:
        cfg = ctx.config
        torch.manual_seed(cfg.seed)
        z_adv = ctx.start_latent.detach().clone()
        if cfg.t_start in timesteps:
            z_adv.requires_grad_(True)
        residuals = {
            i: torch.zeros_like(z_adv, requires_grad=True) for i in timesteps if i != cfg.t_start
        }
        params = ([z_adv] if z_adv.requires_grad else []) + list(residuals.values())
        opt = build_optimizer(cfg.optimizer, params, cfg.adv_lr)

        curves: dict[str, list[float]] = {"total": [], "adv": [], "str": []}
        if obfuscate:
            curves.update({"impersonation": [], "obfuscation": []})
        grad_norms: dict[int, list[float]] = {i: [] for i in timesteps}
        best_total, best_k = math.inf, 0
        best_state = (z_adv.detach().clone(), {i: r.detach().clone() for i, r in residuals.items()})

        started = time.perf_counter()
        for k in tqdm(range(cfg.adv_iters + 1), desc="protect", disable=not self.progress, leave=False):
            terms = self.objective(ctx, target, z_adv, residuals, obfuscate)
            value = terms.total.item()
            if not math.isfinite(value):
                raise NonFiniteError("protect", k, value, f"adv={terms.adv.item()!r} str={terms.structure.item()!r}")
            curves["total"].append(value)
            curves["adv"].append(terms.adv.item())
            curves["str"].append(terms.structure.item())
            if obfuscate:
                curves["impersonation"].append(terms.impersonation.item())
                curves["obfuscation"].append(terms.obfuscation.item())
            if cfg.keep_best and value < best_total:
                best_total, best_k = value, k
                best_state = (z_adv.detach().clone(), {i: r.detach().clone() for i, r in residuals.items()})
            logger.debug("iter %d: total=%.6g adv=%.6g str=%.6g", k, value, curves["adv"][-1], curves["str"][-1])
            if k == cfg.adv_iters:
                break
            opt.zero_grad()
            terms.total.backward()
            if z_adv.requires_grad:
                grad_norms[cfg.t_start].append(float(torch.linalg.vector_norm(z_adv.grad)))
            for i, r in residuals.items():
                grad_norms[i].append(float(torch.linalg.vector_norm(r.grad)))
            opt.step()
        wall = time.perf_counter() - started

        if cfg.keep_best:
            final_z, final_res = best_state
            selected = best_k
        else:
            final_z = z_adv.detach().clone()
            final_res = {i: r.detach().clone() for i, r in residuals.items()}
            selected = cfg.adv_iters
        with torch.no_grad():
            image, _, _ = self.sample_path(ctx, final_z, final_res, capture=False)
        logger.info(
            "Protection done: total %.4g -> %.4g, adv %.4g -> %.4g (%.2fs)",
            curves["total"][0],
            curves["total"][-1],
            curves["adv"][0],
            curves["adv"][-1],
            wall,
        )
        return ProtectedResult(
            protected_image=image,
            final_latent=LatentState(final_z, cfg.t_start),
            loss_curves=curves,
            reference_digest=ctx.reference.digest(),
            config=cfg.to_dict(),
            embeddings=ctx.embeddings,
            reconstruction=ctx.reconstruction,
            selected_iteration=selected,
            residuals=final_res,
            grad_norms=grad_norms,
            wall_clock_s=wall,
        )

    # Entry points
    # -----------------------------------------------------------------------

    def protect(self, x: torch.Tensor, x_t: torch.Tensor) -> ProtectedResult:
        if self.config.mode == "obfuscate_impersonate":
            return self.protect_obfuscate(x, x_t)
        if self.config.multi_timestep:
            return self.multi_timestep_optimize(x, x_t)
        ctx = self.prepare(x)
        return self.optimize(ctx, x_t, [self.config.t_start])

    def protect_obfuscate(self, x: torch.Tensor, x_t_synth: torch.Tensor) -> ProtectedResult:
        """Impersonate a synthesized target while pushing away from the source identity."""
        ctx = self.prepare(x)
        return self.optimize(ctx, x_t_synth, self.config.optimized_timesteps(), obfuscate=True)

    def multi_timestep_optimize(self, x: torch.Tensor, x_t: torch.Tensor) -> ProtectedResult:
        if not self.config.multi_timestep:
            raise ConfigError("multi_timestep_optimize needs config.multi_timestep = true")
        ctx = self.prepare(x)
        return self.optimize(ctx, x_t, self.config.optimized_timesteps())


def protect(
    x: torch.Tensor,
    x_t: torch.Tensor,
    cfg: ProtectionConfig,
    backend: DenoiserBackend,
    codec: LatentCodec,
    ens: SurrogateEnsemble,
    cache: FeatureCache | None = None,
) -> ProtectedResult:
    protector = Protector(backend, codec, ens, cfg, cache or FeatureCache(FEATURE_CACHE_DIR))
    return protector.protect(x, x_t)


def protect_obfuscate(
    x: torch.Tensor,
    x_t_synth: torch.Tensor,
    cfg: ProtectionConfig,
    backend: DenoiserBackend,
    codec: LatentCodec,
    ens: SurrogateEnsemble,
    cache: FeatureCache | None = None,
) -> ProtectedResult:
    protector = Protector(backend, codec, ens, cfg, cache or FeatureCache(FEATURE_CACHE_DIR))
    return protector.protect_obfuscate(x, x_t_synth)


def multi_timestep_optimize(
    x: torch.Tensor,
    x_t: torch.Tensor,
    cfg: ProtectionConfig,
    backend: DenoiserBackend,
    codec: LatentCodec,
    ens: SurrogateEnsemble,
    cache: FeatureCache | None = None,
) -> ProtectedResult:
    protector = Protector(backend, codec, ens, cfg, cache or FeatureCache(FEATURE_CACHE_DIR))
    return protector.multi_timestep_optimize(x, x_t)

"""Analytic toy backend and codecs.

eps(z, t, e) = A_t z + B_t e + c_t with per-timestep matrices drawn from a
single seeded generator. ||A_t||_2 = a_scale and the singular values of B_t
lie in [b_floor * b_scale, b_scale], so the map stays contractive and the
embedding-learning inner problem is a well-conditioned least-squares
instance. One dot-product self-attention site reads the latent as
``tokens`` rows of pixels (channels last).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import torch

from src.backends.base import AttentionKey, AttentionSite, DenoiserBackend, LatentCodec, UncondEmbedding
from src.exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

TOY_SITE = "toy.attn0"


@dataclass(frozen=True)
class ToyBackendConfig:
    seed: int = 0
    latent_shape: tuple[int, int, int] = (3, 8, 8)
    embedding_dim: int = 384
    num_timesteps: int = 20
    tokens: int = 8
    heads: int = 1
    head_dim: int = 8
    a_scale: float = 0.5
    b_scale: float = 0.5
    b_floor: float = 0.5
    c_scale: float = 0.1
    attention_scale: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "latent_shape", tuple(int(s) for s in self.latent_shape))
        if len(self.latent_shape) != 3:
            raise ConfigError("Toy latent shape must be (channels, height, width)")
        dim = math.prod(self.latent_shape)
        if self.tokens < 1 or dim % self.tokens:
            raise ConfigError(f"Latent size {dim} is not divisible into {self.tokens} tokens")
        if self.embedding_dim < 1 or self.num_timesteps < 1 or self.heads < 1 or self.head_dim < 1:
            raise ConfigError("Toy backend sizes must be positive")
        if not 0 <= self.a_scale <= 0.5 or not 0 <= self.b_scale <= 0.5:
            raise ConfigError("Toy backend must stay contractive (a_scale, b_scale <= 0.5)")
        if not 0 < self.b_floor <= 1:
            raise ConfigError("b_floor must lie in (0, 1]")


def _spectral_scaled(gen: torch.Generator, rows: int, cols: int, norm: float) -> torch.Tensor:
    g = torch.randn(rows, cols, generator=gen, dtype=torch.float64)
    if norm == 0:
        return torch.zeros_like(g)
    return g * (norm / torch.linalg.matrix_norm(g, ord=2))


def _conditioned(gen: torch.Generator, rows: int, cols: int, top: float, floor: float) -> torch.Tensor:
    """Random matrix with singular values spread over [floor * top, top]."""
    rank = min(rows, cols)
    u, _ = torch.linalg.qr(torch.randn(rows, rank, generator=gen, dtype=torch.float64))
    v, _ = torch.linalg.qr(torch.randn(cols, rank, generator=gen, dtype=torch.float64))
    s = top * (floor + (1.0 - floor) * torch.rand(rank, generator=gen, dtype=torch.float64))
    s[0] = top
    return (u * s) @ v.T


@dataclass
class ToyBackend(DenoiserBackend):
    config: ToyBackendConfig = field(default_factory=ToyBackendConfig)

    backend_id = "toy"

    def __post_init__(self):
        cfg = self.config
        gen = torch.Generator().manual_seed(cfg.seed)
        d = self.latent_size
        steps = cfg.num_timesteps + 1
        self._a = torch.stack([_spectral_scaled(gen, d, d, cfg.a_scale) for _ in range(steps)])
        self._b = torch.stack(
            [_conditioned(gen, d, cfg.embedding_dim, cfg.b_scale, cfg.b_floor) for _ in range(steps)]
        )
        self._c = cfg.c_scale * torch.randn(steps, d, generator=gen, dtype=torch.float64)
        feat = d // cfg.tokens
        w_std = cfg.attention_scale / math.sqrt(feat)
        self._wq = w_std * torch.randn(cfg.heads, feat, cfg.head_dim, generator=gen, dtype=torch.float64)
        self._wk = w_std * torch.randn(cfg.heads, feat, cfg.head_dim, generator=gen, dtype=torch.float64)
        for t in (self._a, self._b, self._c, self._wq, self._wk):
            t.requires_grad_(False)
        logger.debug("Toy backend seeded with %d (latent %s)", cfg.seed, cfg.latent_shape)

    @classmethod
    def from_params(cls, params: dict[str, Any] | None = None) -> "ToyBackend":
        return cls(ToyBackendConfig(**(params or {})))

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return self.config.latent_shape

    @property
    def latent_size(self) -> int:
        return math.prod(self.config.latent_shape)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    @property
    def attention_sites(self) -> list[AttentionSite]:
        return [AttentionSite(TOY_SITE, self.config.heads, self.config.tokens)]

    def null_embedding(self) -> UncondEmbedding:
        return UncondEmbedding(torch.zeros(self.embedding_dim, dtype=torch.float64), -1)

    def jacobians(self, t: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Exact (d eps/dz, d eps/de) = (A_t, B_t) on flattened tensors."""
        self._check_timestep(t)
        return self._a[t], self._b[t]

    def offset(self, t: int) -> torch.Tensor:
        self._check_timestep(t)
        return self._c[t]

    def attention_weights(self, head: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
        return self._wq[head], self._wk[head]

    def tokens_of(self, z: torch.Tensor) -> torch.Tensor:
        """Latent as (tokens, features): channels last, then row-major chunks."""
        return z.permute(1, 2, 0).reshape(self.config.tokens, -1)

    def _check_timestep(self, t: int) -> None:
        if not 0 <= t <= self.config.num_timesteps:
            raise ConfigError(f"Toy backend has parameters for t in [0, {self.config.num_timesteps}], got {t}")

    def _predict(self, z: torch.Tensor, t: int, e: torch.Tensor) -> torch.Tensor:
        self._check_timestep(t)
        a, b, c = self._a[t], self._b[t], self._c[t]
        flat = a.to(z.dtype) @ z.reshape(-1) + b.to(z.dtype) @ e.reshape(-1).to(z.dtype) + c.to(z.dtype)
        return flat.reshape(z.shape)

    def _attention(self, z: torch.Tensor, t: int, e: torch.Tensor) -> dict[AttentionKey, torch.Tensor]:
        self._check_timestep(t)
        x = self.tokens_of(z)
        x = x - x.mean(dim=0, keepdim=True)
        maps: dict[AttentionKey, torch.Tensor] = {}
        for h in range(self.config.heads):
            q = x @ self._wq[h].to(z.dtype)
            k = x @ self._wk[h].to(z.dtype)
            logits = q @ k.T / math.sqrt(self.config.head_dim)
            maps[(TOY_SITE, h)] = torch.softmax(logits, dim=-1)
        return maps

    def to_dict(self) -> dict[str, Any]:
        """Seed-complete description plus the drawn parameters for audits."""
        return {
            "backend": self.backend_id,
            "config": asdict(self.config),
            "params": {
                "A": self._a.tolist(),
                "B": self._b.tolist(),
                "c": self._c.tolist(),
                "Wq": self._wq.tolist(),
                "Wk": self._wk.tolist(),
            },
        }


# Codecs
# ---------------------------------------------------------------------------


@dataclass
class IdentityCodec(LatentCodec):
    """Latent is the image itself, channels first."""

    shape: tuple[int, int, int] = (8, 8, 3)

    codec_id = "identity"
    tolerance = 0.0

    @classmethod
    def from_params(cls, params: dict[str, Any] | None = None) -> "IdentityCodec":
        params = dict(params or {})
        if "shape" in params:
            params["shape"] = tuple(params["shape"])
        return cls(**params)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.shape)

    @property
    def latent_shape(self) -> tuple[int, ...]:
        h, w, c = self.shape
        return (c, h, w)

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        return x.permute(2, 0, 1).contiguous()

    def _decode(self, z: torch.Tensor) -> torch.Tensor:
        return z.permute(1, 2, 0).contiguous()


@dataclass
class LinearCodec(LatentCodec):
    """Orthonormal projection onto a seeded subspace; round trip = projection."""

    shape: tuple[int, int, int] = (8, 8, 3)
    latent: tuple[int, int, int] = (3, 8, 8)
    seed: int = 0

    codec_id = "linear"

    def __post_init__(self):
        self.shape = tuple(self.shape)
        self.latent = tuple(self.latent)
        n, k = math.prod(self.shape), math.prod(self.latent)
        if k > n:
            raise ShapeError(f"Latent size {k} exceeds image size {n}")
        gen = torch.Generator().manual_seed(self.seed)
        q, _ = torch.linalg.qr(torch.randn(n, k, generator=gen, dtype=torch.float64))
        self._basis = q.T.contiguous()  # k x n, orthonormal rows
        self.tolerance = 0.0 if k == n else self._worst_case_error()

    def _worst_case_error(self) -> float:
        """Largest |((I - P) x)_i| over the pixel box [0, 1]^n.

        A linear form over the box peaks at the sum of its positive coefficients
        and bottoms out at the sum of its negative ones.
        """
        residual = torch.eye(self._basis.shape[1], dtype=torch.float64) - self._basis.T @ self._basis
        upper = residual.clamp(min=0.0).sum(dim=1)
        lower = (-residual).clamp(min=0.0).sum(dim=1)
        return float(torch.maximum(upper, lower).max())

    def discarded_energy(self, x: torch.Tensor) -> torch.Tensor:
        """||x||^2 - ||E x||^2: the squared norm the projection throws away."""
        kept = self._encode(x)
        return x.reshape(-1).pow(2).sum() - kept.reshape(-1).pow(2).sum()

    @classmethod
    def from_params(cls, params: dict[str, Any] | None = None) -> "LinearCodec":
        params = dict(params or {})
        for key in ("shape", "latent"):
            if key in params:
                params[key] = tuple(params[key])
        return cls(**params)

    @property
    def basis(self) -> torch.Tensor:
        return self._basis

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.shape)

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return tuple(self.latent)

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        return (self._basis.to(x.dtype) @ x.reshape(-1)).reshape(self.latent)

    def _decode(self, z: torch.Tensor) -> torch.Tensor:
        return (self._basis.T.to(z.dtype) @ z.reshape(-1)).reshape(self.shape)

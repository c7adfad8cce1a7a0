"""Backend contracts: denoiser, latent codec, attention exposure.

Gradients are obtained through torch autograd on the tensors a backend
returns; ``noise_vjp`` wraps that into the vector-Jacobian product callers
may rely on without touching autograd themselves.
"""

from __future__ import annotations

import abc
import logging
from dataclasses import dataclass

import torch

from src.exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

AttentionKey = tuple[str, int]  # (layer_id, head)


@dataclass(frozen=True)
class AttentionSite:
    layer_id: str
    head_count: int
    token_count: int


@dataclass
class UncondEmbedding:
    values: torch.Tensor
    timestep: int

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise ConfigError(f"Unconditional embedding for t={self.timestep} has non-finite entries")

    def detached(self) -> "UncondEmbedding":
        return UncondEmbedding(self.values.detach().clone(), self.timestep)


class DenoiserBackend(abc.ABC):
    """Noise predictor eps_theta(z_t, t, e) plus self-attention exposure."""

    backend_id: str = ""

    @property
    @abc.abstractmethod
    def latent_shape(self) -> tuple[int, ...]: ...

    @property
    @abc.abstractmethod
    def embedding_dim(self) -> int: ...

    @property
    @abc.abstractmethod
    def attention_sites(self) -> list[AttentionSite]: ...

    @abc.abstractmethod
    def null_embedding(self) -> UncondEmbedding:
        """Initial unconditional embedding (the empty-prompt embedding)."""

    @abc.abstractmethod
    def _predict(self, z: torch.Tensor, t: int, e: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def _attention(self, z: torch.Tensor, t: int, e: torch.Tensor) -> dict[AttentionKey, torch.Tensor]: ...

    def predict_noise(self, z: torch.Tensor, t: int, e: torch.Tensor) -> torch.Tensor:
        self._check_inputs(z, e)
        out = self._predict(z, t, e)
        if out.shape != z.shape:
            raise ShapeError(f"{self.backend_id}: prediction shape {tuple(out.shape)} != latent shape")
        return out

    def capture_attention(self, z: torch.Tensor, t: int, e: torch.Tensor) -> dict[AttentionKey, torch.Tensor]:
        """Row-stochastic self-attention matrices keyed by (layer_id, head)."""
        self._check_inputs(z, e)
        if not self.attention_sites:
            return {}
        return self._attention(z, t, e)

    def noise_vjp(
        self, z: torch.Tensor, t: int, e: torch.Tensor, cotangent: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(v^T d eps/dz, v^T d eps/de) at (z, t, e)."""
        z_in = z.detach().clone().requires_grad_(True)
        e_in = e.detach().clone().requires_grad_(True)
        out = self.predict_noise(z_in, t, e_in)
        grad_z, grad_e = torch.autograd.grad(out, (z_in, e_in), grad_outputs=cotangent)
        return grad_z, grad_e

    def _check_inputs(self, z: torch.Tensor, e: torch.Tensor) -> None:
        if tuple(z.shape) != tuple(self.latent_shape):
            raise ShapeError(f"{self.backend_id}: latent shape {tuple(z.shape)} != {tuple(self.latent_shape)}")
        if e.numel() != self.embedding_dim:
            raise ShapeError(f"{self.backend_id}: embedding dim {e.numel()} != {self.embedding_dim}")
        if not torch.isfinite(z).all():
            raise ShapeError(f"{self.backend_id}: latent has non-finite entries")


class LatentCodec(abc.ABC):
    """Image <-> latent map (E / D). Images are H x W x C floats in [0, 1]."""

    codec_id: str = ""
    # Declared round-trip tolerance (max abs error) for images in range.
    tolerance: float = 0.0

    @property
    @abc.abstractmethod
    def image_shape(self) -> tuple[int, int, int]: ...

    @property
    @abc.abstractmethod
    def latent_shape(self) -> tuple[int, ...]: ...

    @abc.abstractmethod
    def _encode(self, x: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def _decode(self, z: torch.Tensor) -> torch.Tensor: ...

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape) != tuple(self.image_shape):
            raise ShapeError(f"{self.codec_id}: image shape {tuple(x.shape)} != {tuple(self.image_shape)}")
        if x.min() < 0 or x.max() > 1:
            raise ConfigError(f"{self.codec_id}: pixel values must lie in [0, 1]")
        return self._encode(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape) != tuple(self.latent_shape):
            raise ShapeError(f"{self.codec_id}: latent shape {tuple(z.shape)} != {tuple(self.latent_shape)}")
        return self._decode(z)

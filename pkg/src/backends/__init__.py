"""Backend registry keyed by string id."""

from __future__ import annotations

from typing import Any, Callable

from src.exceptions import UnknownModelError

from .base import AttentionSite, DenoiserBackend, LatentCodec, UncondEmbedding
from .toy import IdentityCodec, LinearCodec, ToyBackend, ToyBackendConfig


def _ldm_backend(params: dict[str, Any] | None) -> DenoiserBackend:
    from .ldm import LDMAdapter

    return LDMAdapter.from_params(params)


def _ldm_codec(params: dict[str, Any] | None) -> LatentCodec:
    from .ldm import LDMCodec

    return LDMCodec.from_params(params)


BACKENDS: dict[str, Callable[[dict[str, Any] | None], DenoiserBackend]] = {
    "toy": ToyBackend.from_params,
    "ldm-adapter": _ldm_backend,
}

CODECS: dict[str, Callable[[dict[str, Any] | None], LatentCodec]] = {
    "identity": IdentityCodec.from_params,
    "linear": LinearCodec.from_params,
    "ldm-vae": _ldm_codec,
}


def create_backend(backend_id: str, params: dict[str, Any] | None = None) -> DenoiserBackend:
    if backend_id not in BACKENDS:
        raise UnknownModelError(f"Unknown backend {backend_id!r}; known: {sorted(BACKENDS)}")
    return BACKENDS[backend_id](params)


def create_codec(codec_id: str, params: dict[str, Any] | None = None) -> LatentCodec:
    if codec_id not in CODECS:
        raise UnknownModelError(f"Unknown codec {codec_id!r}; known: {sorted(CODECS)}")
    return CODECS[codec_id](params)


__all__ = [
    "AttentionSite",
    "BACKENDS",
    "CODECS",
    "DenoiserBackend",
    "IdentityCodec",
    "LatentCodec",
    "LinearCodec",
    "ToyBackend",
    "ToyBackendConfig",
    "UncondEmbedding",
    "create_backend",
    "create_codec",
]

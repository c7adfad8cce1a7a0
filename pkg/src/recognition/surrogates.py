"""Face-recognition feature extractors, surrogate ensembles and identity losses."""

from __future__ import annotations

import abc
import hashlib
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from src.exceptions import ConfigError, DegenerateFeatureError, ShapeError

logger = logging.getLogger(__name__)


# Aligners
# ---------------------------------------------------------------------------


class IdentityAligner:
    """Images are assumed to be aligned and cropped already."""

    name = "identity"

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return x


@dataclass
class ExternalAligner:
    """Delegates alignment to an external detector (e.g. an MTCNN wrapper)."""

    hook: Callable[[torch.Tensor], torch.Tensor] | None = None

    name = "external"

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.hook is None:
            raise ConfigError("External aligner has no detector hook configured")
        return self.hook(x)


# Extractors
# ---------------------------------------------------------------------------


class FeatureExtractor(abc.ABC):
    model_id: str
    resolution: tuple[int, int]
    aligner: Callable[[torch.Tensor], torch.Tensor]

    @abc.abstractmethod
    def _embed(self, x: torch.Tensor) -> torch.Tensor: ...

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        aligned = self.aligner(x)
        if tuple(aligned.shape[:2]) != tuple(self.resolution):
            chw = aligned.permute(2, 0, 1)[None]
            aligned = F.interpolate(chw, size=tuple(self.resolution), mode="bilinear", align_corners=False)
            aligned = aligned[0].permute(1, 2, 0)
        if tuple(aligned.shape[:2]) != tuple(self.resolution):
            raise ShapeError(f"{self.model_id}: preprocessed size {tuple(aligned.shape[:2])} != {self.resolution}")
        return aligned

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        """Feature vector of an H x W x C image in [0, 1]; differentiable in x."""
        if x.dim() != 3:
            raise ShapeError(f"{self.model_id}: expected an H x W x C image, got {tuple(x.shape)}")
        return self._embed(self.preprocess(x))

    @property
    def fingerprint(self) -> str:
        """Digest of everything that determines the features, model id aside."""
        parts = [type(self).__name__, repr(tuple(self.resolution)), getattr(self.aligner, "name", "")]
        return hashlib.sha256("|".join([*parts, *self._fingerprint_parts()]).encode("utf-8")).hexdigest()

    def _fingerprint_parts(self) -> list[str]:
        return []


@dataclass
class ToyLinearEmbedder(FeatureExtractor):
    """feature = W (flatten(x) - 0.5) with a seeded Gaussian W."""

    model_id: str = "toy-fr-0"
    resolution: tuple[int, int] = (8, 8)
    channels: int = 3
    dim: int = 64
    seed: int = 0
    aligner: Callable[[torch.Tensor], torch.Tensor] = field(default_factory=IdentityAligner)

    def __post_init__(self):
        self.resolution = tuple(self.resolution)
        n = self.resolution[0] * self.resolution[1] * self.channels
        gen = torch.Generator().manual_seed(self.seed)
        self._weight = torch.randn(self.dim, n, generator=gen, dtype=torch.float64) / math.sqrt(n)

    @property
    def weight(self) -> torch.Tensor:
        """Jacobian of the feature map w.r.t. the flattened image."""
        return self._weight

    def _fingerprint_parts(self) -> list[str]:
        return [f"channels={self.channels}", f"dim={self.dim}", f"seed={self.seed}"]

    def _embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"{self.model_id}: expected {self.channels} channels, got {x.shape[-1]}")
        return self._weight.to(x.dtype) @ (x.reshape(-1) - 0.5)


@dataclass
class TorchScriptExtractor(FeatureExtractor):  # pragma: no cover - needs external weights
    """Production adapter: a TorchScript FR model fed NCHW images in [-1, 1]."""

    model_id: str
    weights: Path
    resolution: tuple[int, int] = (112, 112)
    aligner: Callable[[torch.Tensor], torch.Tensor] = field(default_factory=IdentityAligner)

    def __post_init__(self):
        self.resolution = tuple(self.resolution)
        self._module = torch.jit.load(str(self.weights), map_location="cpu").eval()
        for p in self._module.parameters():
            p.requires_grad_(False)
        self._weights_digest = hashlib.sha256(self.weights.read_bytes()).hexdigest()

    def _fingerprint_parts(self) -> list[str]:
        return [self._weights_digest]

    def _embed(self, x: torch.Tensor) -> torch.Tensor:
        batch = (x.permute(2, 0, 1)[None] * 2.0 - 1.0).to(torch.float32)
        return self._module(batch)[0].to(x.dtype)


# Distances and losses
# ---------------------------------------------------------------------------


def cosine_distance(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """1 - cos(f1, f2), in [0, 2]."""
    if f1.shape != f2.shape:
        raise ShapeError(f"Feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    n1 = torch.linalg.vector_norm(f1)
    n2 = torch.linalg.vector_norm(f2)
    if n1 == 0 or n2 == 0:
        raise DegenerateFeatureError("Cosine distance is undefined for zero-norm features")
    cos = torch.dot(f1, f2) / (n1 * n2)
    return (1.0 - cos).clamp(0.0, 2.0)


def cosine_similarity(f1: torch.Tensor, f2: torch.Tensor) -> float:
    return float(1.0 - cosine_distance(f1, f2))


@dataclass
class SurrogateEnsemble:
    extractors: list[FeatureExtractor]

    def __post_init__(self):
        if not self.extractors:
            raise ConfigError("Surrogate ensemble is empty")
        ids = [m.model_id for m in self.extractors]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"Duplicate model ids in ensemble: {ids}")

    def __iter__(self) -> Iterator[FeatureExtractor]:
        return iter(self.extractors)

    def __len__(self) -> int:
        return len(self.extractors)

    @property
    def ids(self) -> list[str]:
        return [m.model_id for m in self.extractors]

    def get(self, model_id: str) -> FeatureExtractor:
        for m in self.extractors:
            if m.model_id == model_id:
                return m
        raise ConfigError(f"Model {model_id!r} is not part of the ensemble {self.ids}")

    def leave_one_out(self, held_out: str) -> tuple["SurrogateEnsemble", FeatureExtractor]:
        """Training ensemble without ``held_out`` plus the held-out evaluator."""
        evaluator = self.get(held_out)
        rest = [m for m in self.extractors if m.model_id != held_out]
        return SurrogateEnsemble(rest), evaluator


def image_digest(x: torch.Tensor) -> str:
    return hashlib.sha256(x.detach().to(torch.float64).contiguous().numpy().tobytes()).hexdigest()


@dataclass
class FeatureCache:
    """Write-once features of fixed images (targets), optionally mirrored on disk.

    Entries are keyed by model id, extractor fingerprint and image digest, so a
    registry entry that keeps its id but changes its weights misses the cache.
    Unreadable files on disk count as misses and are rewritten.
    """

    cache_dir: Path | None = None
    _entries: dict[tuple[str, str, str], torch.Tensor] = field(default_factory=dict, repr=False)

    def get(self, extractor: FeatureExtractor, x: torch.Tensor) -> torch.Tensor:
        key = (extractor.model_id, extractor.fingerprint, image_digest(x))
        if key in self._entries:
            return self._entries[key]
        feat = self._load(key)
        if feat is None:
            with torch.no_grad():
                feat = extractor.extract(x.detach())
            self._store(key, feat)
        self._entries[key] = feat.detach()
        return self._entries[key]

    def __len__(self) -> int:
        return len(self._entries)

    def _path(self, key: tuple[str, str, str]) -> Path | None:
        if self.cache_dir is None:
            return None
        model_id, fingerprint, digest = key
        return self.cache_dir / model_id / fingerprint[:16] / f"{digest}.npy"

    def _load(self, key: tuple[str, str, str]) -> torch.Tensor | None:
        path = self._path(key)
        if path is None or not path.is_file():
            return None
        try:
            return torch.from_numpy(np.load(path, allow_pickle=False))
        except (ValueError, OSError, EOFError) as exc:
            logger.warning("Ignoring unreadable feature cache entry %s: %s", path, exc)
            return None

    def _store(self, key: tuple[str, str, str], feat: torch.Tensor) -> None:
        path = self._path(key)
        if path is None:
            return
        tmp = path.with_name(f"{path.stem}.{os.getpid()}-{threading.get_ident()}.tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with tmp.open("wb") as f:
                np.save(f, feat.detach().numpy())
            tmp.replace(path)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            logger.warning("Could not write feature cache entry %s: %s", path, exc)


def _target_features(ens: SurrogateEnsemble, x: torch.Tensor, cache: FeatureCache | None) -> list[torch.Tensor]:
    if cache is None:
        with torch.no_grad():
            return [m.extract(x.detach()) for m in ens]
    return [cache.get(m, x) for m in ens]


def mean_feature_distance(
    x_p: torch.Tensor, x_ref: torch.Tensor, ens: SurrogateEnsemble, cache: FeatureCache | None = None
) -> torch.Tensor:
    """(1/K) sum_k [1 - cos(F_k(x_p), F_k(x_ref))], reference features held fixed."""
    if len(ens) == 0:
        raise ConfigError("Surrogate ensemble is empty")
    refs = _target_features(ens, x_ref, cache)
    terms = [cosine_distance(m.extract(x_p), ref.to(x_p.dtype)) for m, ref in zip(ens, refs)]
    return torch.stack(terms).mean()


def adversarial_loss(
    x_p: torch.Tensor, x_t: torch.Tensor, ens: SurrogateEnsemble, cache: FeatureCache | None = None
) -> torch.Tensor:
    """Impersonation loss: mean cosine distance to the target over the ensemble."""
    return mean_feature_distance(x_p, x_t, ens, cache)


def obfuscation_terms(
    x_p: torch.Tensor,
    x_src: torch.Tensor,
    x_t_synth: torch.Tensor,
    ens: SurrogateEnsemble,
    cache: FeatureCache | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(impersonation distance to the synthesized target, distance to the source)."""
    imp = mean_feature_distance(x_p, x_t_synth, ens, cache)
    obf = mean_feature_distance(x_p, x_src, ens, cache)
    return imp, obf


def obfuscation_loss(
    x_p: torch.Tensor,
    x_src: torch.Tensor,
    x_t_synth: torch.Tensor,
    ens: SurrogateEnsemble,
    w_obf: float,
    cache: FeatureCache | None = None,
) -> torch.Tensor:
    if w_obf < 0:
        raise ConfigError(f"w_obf must be non-negative, got {w_obf}")
    imp, obf = obfuscation_terms(x_p, x_src, x_t_synth, ens, cache)
    return imp - w_obf * obf

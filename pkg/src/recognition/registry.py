"""Model registry: id -> {adapter, resolution, alignment, ...} documents."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Callable

import torch

from src.exceptions import ConfigError, UnknownModelError
from src.recognition.surrogates import (
    ExternalAligner,
    FeatureExtractor,
    IdentityAligner,
    SurrogateEnsemble,
    TorchScriptExtractor,
    ToyLinearEmbedder,
)

logger = logging.getLogger(__name__)

# Detector hooks for the external aligner, registered by the host application.
ALIGNER_HOOKS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {}


def register_aligner_hook(name: str, hook: Callable[[torch.Tensor], torch.Tensor]) -> None:
    ALIGNER_HOOKS[name] = hook


def _aligner(spec: dict[str, Any]):
    mode = spec.get("alignment", "identity")
    if mode == "identity":
        return IdentityAligner()
    if mode == "external":
        return ExternalAligner(ALIGNER_HOOKS.get(spec.get("aligner_hook", "default")))
    raise ConfigError(f"Unknown alignment mode {mode!r}")


def build_extractor(model_id: str, spec: dict[str, Any]) -> FeatureExtractor:
    adapter = spec.get("adapter", "toy-linear")
    resolution = tuple(spec.get("resolution", (8, 8)))
    if adapter == "toy-linear":
        return ToyLinearEmbedder(
            model_id=model_id,
            resolution=resolution,
            channels=int(spec.get("channels", 3)),
            dim=int(spec.get("dim", 64)),
            seed=int(spec.get("seed", 0)),
            aligner=_aligner(spec),
        )
    if adapter == "torchscript":
        if "weights" not in spec:
            raise ConfigError(f"Model {model_id!r}: torchscript adapter needs a 'weights' path")
        return TorchScriptExtractor(
            model_id=model_id, weights=Path(spec["weights"]), resolution=resolution, aligner=_aligner(spec)
        )
    raise ConfigError(f"Model {model_id!r}: unknown adapter {adapter!r}")


def toy_registry_doc(n_models: int = 4, resolution=(8, 8), dim: int = 64, seed: int = 0) -> dict[str, Any]:
    """Inline registry of seeded toy linear embedders ``toy-fr-0 .. toy-fr-{n-1}``."""
    return {
        f"toy-fr-{k}": {
            "adapter": "toy-linear",
            "resolution": list(resolution),
            "alignment": "identity",
            "dim": dim,
            "seed": seed * 1000 + k,
        }
        for k in range(n_models)
    }


class ModelRegistry:
    def __init__(self, doc: dict[str, Any]):
        if not isinstance(doc, dict):
            raise ConfigError("Model registry must be a JSON object")
        self._specs = doc
        self._built: dict[str, FeatureExtractor] = {}

    @classmethod
    def from_file(cls, path: Path) -> "ModelRegistry":
        try:
            return cls(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"Cannot read model registry {path}: {exc}") from exc

    @property
    def ids(self) -> list[str]:
        return sorted(self._specs)

    def get(self, model_id: str) -> FeatureExtractor:
        if model_id not in self._specs:
            raise UnknownModelError(f"Unknown model id {model_id!r}; known: {self.ids}")
        if model_id not in self._built:
            self._built[model_id] = build_extractor(model_id, self._specs[model_id])
        return self._built[model_id]

    def ensemble(self, ids: list[str]) -> SurrogateEnsemble:
        return SurrogateEnsemble([self.get(i) for i in ids])

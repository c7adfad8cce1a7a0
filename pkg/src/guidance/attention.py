"""Self-attention structure guidance.

Reference maps are recorded along the unperturbed sampling path z_bar; the
structure loss compares maps captured along the adversarial path against
them. Keys are (timestep, layer_id, head).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from PIL import Image

from src.backends.base import DenoiserBackend
from src.diffusion.inversion import UncondEmbeddingSet
from src.diffusion.schedule import NoiseSchedule
from src.exceptions import ConfigError, KeyMismatchError, ShapeError

logger = logging.getLogger(__name__)

MapKey = tuple[int, str, int]
SiteFilter = Callable[[str], bool] | Iterable[str] | None

ROW_SUM_TOL = 1e-6


@dataclass
class AttentionMapSet:
    maps: dict[MapKey, torch.Tensor] = field(default_factory=dict)

    def keys(self) -> list[MapKey]:
        return sorted(self.maps)

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, key: MapKey) -> torch.Tensor:
        return self.maps[key]

    def add(self, timestep: int, site_maps: dict[tuple[str, int], torch.Tensor]) -> None:
        for (layer, head), m in site_maps.items():
            self.maps[(timestep, layer, head)] = m

    def detached(self) -> "AttentionMapSet":
        return AttentionMapSet({k: v.detach().clone() for k, v in self.maps.items()})

    def check_stochastic(self, tol: float = ROW_SUM_TOL) -> None:
        for key, m in self.maps.items():
            if m.dim() != 2 or m.shape[0] != m.shape[1]:
                raise ShapeError(f"Attention map {key} is not square: {tuple(m.shape)}")
            if (m < 0).any() or (m > 1).any():
                raise ShapeError(f"Attention map {key} has entries outside [0, 1]")
            if (m.sum(dim=-1) - 1).abs().max() > tol:
                raise ShapeError(f"Attention map {key} rows do not sum to 1")

    def digest(self) -> str:
        """SHA-256 over keys and float64 map bytes in key order."""
        h = hashlib.sha256()
        for key in self.keys():
            h.update(json.dumps(list(key)).encode("utf-8"))
            h.update(self.maps[key].detach().to(torch.float64).contiguous().numpy().tobytes())
        return h.hexdigest()


def resolve_site_filter(site_filter: SiteFilter) -> Callable[[str], bool]:
    if site_filter is None:
        return lambda layer: True
    if callable(site_filter):
        return site_filter
    wanted = set(site_filter)
    return lambda layer: layer in wanted


def capture_filtered(
    backend: DenoiserBackend,
    z: torch.Tensor,
    t: int,
    e: torch.Tensor,
    keep: Callable[[str], bool],
) -> dict[tuple[str, int], torch.Tensor]:
    site_maps = backend.capture_attention(z, t, e)
    return {key: m for key, m in site_maps.items() if keep(key[0])}


def record_reference_maps(
    emb_set: UncondEmbeddingSet,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    site_filter: SiteFilter = None,
) -> AttentionMapSet:
    """Capture self-attention at every sampling step t_start..1 of the z_bar path."""
    keep = resolve_site_filter(site_filter)
    selected = [s for s in backend.attention_sites if keep(s.layer_id)]
    if not selected:
        raise ConfigError("Site filter selects no attention sites")

    ref = AttentionMapSet()
    with torch.no_grad():
        for i in emb_set.timesteps:
            z_bar = emb_set.bar_latent_at(i)
            site_maps = capture_filtered(
                backend, z_bar.values, sched.model_timestep(i), emb_set.embedding_at(i), keep
            )
            ref.add(i, site_maps)
    logger.info("Recorded %d reference attention maps over %d timesteps", len(ref), len(emb_set.timesteps))
    return ref.detached()


def structure_loss(adv_maps: AttentionMapSet, ref_maps: AttentionMapSet, reduction: str = "mean") -> torch.Tensor:
    """Distance between adversarial and reference attention maps.

    ``mean``: mean over keys of the per-map mean squared error.
    ``sum``: squared L2 norm summed over every entry of every map.
    """
    if set(adv_maps.maps) != set(ref_maps.maps):
        missing = sorted(set(ref_maps.maps) ^ set(adv_maps.maps))
        raise KeyMismatchError(f"Attention key sets differ on {missing[:5]}")
    if not adv_maps.maps:
        raise KeyMismatchError("Cannot compare empty attention map sets")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"Unknown structure loss reduction {reduction!r}")

    terms = []
    for key in adv_maps.keys():
        diff = adv_maps[key] - ref_maps[key].to(adv_maps[key].dtype)
        sq = diff**2
        terms.append(sq.mean() if reduction == "mean" else sq.sum())
    stacked = torch.stack(terms)
    return stacked.mean() if reduction == "mean" else stacked.sum()


@dataclass
class SVDComponents:
    components: list[torch.Tensor]
    singular_values: torch.Tensor
    right_vectors: torch.Tensor

    def reconstruction(self) -> torch.Tensor:
        return torch.stack(self.components).sum(dim=0)


def svd_components(attn_map: torch.Tensor, k: int) -> SVDComponents:
    """Top-k rank-1 components sigma_j u_j v_j^T, ordered by singular value.

    All singular values are returned so the residual after k components can
    be read off as sigma_{k+1}.
    """
    if attn_map.dim() != 2:
        raise ShapeError("svd_components expects a single 2-D map")
    if not 1 <= k <= min(attn_map.shape):
        raise ConfigError(f"k must lie in [1, {min(attn_map.shape)}], got {k}")
    u, s, vh = torch.linalg.svd(attn_map.detach().to(torch.float64))
    components = [s[j] * torch.outer(u[:, j], vh[j]) for j in range(k)]
    return SVDComponents(components, s, vh[:k])


def render_components(
    attn_map: torch.Tensor,
    k: int,
    grid: tuple[int, int],
    out_dir: Path,
    prefix: str = "component",
    size: int = 128,
) -> list[Path]:
    """Write the top-k right singular vectors as grayscale PNG grids.

    Rows are mean-centred first so the components show structure rather than
    the shared row mass; a ``<prefix>_singular_values.json`` sidecar lists
    the spectrum of the centred map.
    """
    if grid[0] * grid[1] != attn_map.shape[-1]:
        raise ShapeError(f"Grid {grid} does not cover {attn_map.shape[-1]} tokens")
    centred = attn_map.detach().to(torch.float64)
    centred = centred - centred.mean(dim=1, keepdim=True)
    comps = svd_components(centred, k)

    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for j in range(k):
        image = comps.right_vectors[j].reshape(grid).numpy()
        image = image - image.min()
        peak = image.max()
        image = 255 * image / peak if peak > 0 else image
        path = out_dir / f"{prefix}_{j}.png"
        Image.fromarray(image.astype(np.uint8)).resize((size, size), Image.NEAREST).save(path)
        paths.append(path)

    sidecar = out_dir / f"{prefix}_singular_values.json"
    sidecar.write_text(json.dumps({"singular_values": comps.singular_values.tolist(), "k": k}, indent=2))
    paths.append(sidecar)
    logger.info("Wrote %d attention components to %s", k, out_dir)
    return paths

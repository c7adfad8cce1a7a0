"""Seeded desk-scale face sets for the toy acceptance studies.

Each identity is a low-frequency colour pattern (a coarse random grid
upsampled to the image size); each image of an identity adds independent
pixel noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from src.exceptions import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class SyntheticFaceSet:
    sources: list[torch.Tensor]
    source_ids: list[int]
    # target group of each source
    groups: list[int]
    target_train: list[torch.Tensor]
    target_test: list[torch.Tensor]
    target_ids: list[int]
    gallery: list[torch.Tensor]
    gallery_ids: list[int]

    def __len__(self) -> int:
        return len(self.sources)

    def target_pair(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        """(train, test) target images for source ``index``."""
        g = self.groups[index]
        return self.target_train[g], self.target_test[g]

    def test_targets(self) -> list[torch.Tensor]:
        return [self.target_test[g] for g in self.groups]


def _prototype(gen: torch.Generator, shape: tuple[int, int, int], grid: int) -> torch.Tensor:
    h, w, c = shape
    coarse = torch.randn(1, c, grid, grid, generator=gen, dtype=torch.float64)
    fine = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=True)[0]
    fine = fine / fine.abs().max()
    return fine.permute(1, 2, 0)


def _sample(gen: torch.Generator, proto: torch.Tensor, amplitude: float, noise: float) -> torch.Tensor:
    image = 0.5 + amplitude * proto + noise * torch.randn(proto.shape, generator=gen, dtype=torch.float64)
    return image.clamp(0.0, 1.0)


def make_synthetic_faces(
    n_sources: int = 20,
    n_groups: int = 4,
    n_gallery_ids: int = 16,
    images_per_gallery_id: int = 2,
    shape: tuple[int, int, int] = (8, 8, 3),
    grid: int = 3,
    amplitude: float = 0.3,
    noise: float = 0.02,
    seed: int = 0,
) -> SyntheticFaceSet:
    if n_sources < 1 or not 1 <= n_groups <= 4:
        raise ConfigError("Need at least one source and between 1 and 4 target groups")
    if amplitude <= 0 or amplitude + 3 * noise > 0.5:
        raise ConfigError("amplitude and noise must keep images inside [0, 1]")
    gen = torch.Generator().manual_seed(seed)
    n_ids = n_sources + n_groups + n_gallery_ids
    protos = [_prototype(gen, shape, grid) for _ in range(n_ids)]

    sources = [_sample(gen, protos[i], amplitude, noise) for i in range(n_sources)]
    target_ids = list(range(n_sources, n_sources + n_groups))
    target_train = [_sample(gen, protos[i], amplitude, noise) for i in target_ids]
    target_test = [_sample(gen, protos[i], amplitude, noise) for i in target_ids]

    gallery, gallery_ids = [], []
    for i in range(n_sources + n_groups, n_ids):
        for _ in range(images_per_gallery_id):
            gallery.append(_sample(gen, protos[i], amplitude, noise))
            gallery_ids.append(i)

    logger.debug("Synthesized %d sources, %d targets, %d gallery images", n_sources, n_groups, len(gallery))
    return SyntheticFaceSet(
        sources=sources,
        source_ids=list(range(n_sources)),
        groups=[i % n_groups for i in range(n_sources)],
        target_train=target_train,
        target_test=target_test,
        target_ids=target_ids,
        gallery=gallery,
        gallery_ids=gallery_ids,
    )

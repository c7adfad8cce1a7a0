"""Ablation and robustness studies on the toy pipeline.

All PSR and FID numbers produced here are proxies: the same formulas applied
to toy embedder features, not comparable with full-scale results.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np
import torch
from tqdm import tqdm

from src.backends.base import DenoiserBackend, LatentCodec
from src.backends.toy import IdentityCodec, ToyBackend, ToyBackendConfig
from src.config import SHOW_PROGRESS
from src.evaluation.metrics import (
    DEFAULT_KERNELS,
    ScoreSet,
    SmoothingKernel,
    ThresholdCalibration,
    calibrate_threshold,
    extract_features,
    fid,
    impostor_scores,
    psr_from_scores,
    similarity_scores,
)
from src.evaluation.synthetic import SyntheticFaceSet, make_synthetic_faces
from src.exceptions import ConfigError
from src.protector import ProtectedResult, ProtectionConfig, Protector
from src.recognition.registry import ModelRegistry, toy_registry_doc
from src.recognition.surrogates import FeatureCache, FeatureExtractor, SurrogateEnsemble

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

DEFAULT_T_GRID = (1, 3, 5, 7)
DEFAULT_VARIANTS = ("with_null", "without_null", "with_attn", "without_attn")
DEFAULT_LAMBDA_GRID = (0.001, 0.003, 0.006, 0.01)

# variant -> ProtectionConfig overrides
VARIANT_SWITCHES: dict[str, dict[str, Any]] = {
    "with_null": {"use_null_embeddings": True, "use_structure_loss": True},
    "without_null": {"use_null_embeddings": False, "use_structure_loss": True},
    "with_attn": {"use_null_embeddings": True, "use_structure_loss": True},
    "without_attn": {"use_null_embeddings": True, "use_structure_loss": False},
}


def map_jobs(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1, desc: str = "") -> list[R]:
    """Order-preserving map over at most ``jobs`` worker threads."""
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    bar = tqdm(total=len(items), desc=desc, disable=not SHOW_PROGRESS, leave=False)
    try:
        if jobs == 1:
            results = []
            for item in items:
                results.append(fn(item))
                bar.update()
            return results
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(fn, item) for item in items]
            results = []
            for fut in futures:
                results.append(fut.result())
                bar.update()
            return results
    finally:
        bar.close()


@dataclass
class StudySetup:
    """Faces, pipeline components and the leave-one-out evaluator of one study."""

    faces: SyntheticFaceSet
    backend: DenoiserBackend
    codec: LatentCodec
    registry: ModelRegistry
    ensemble_ids: list[str]
    evaluator_id: str
    far: float = 0.01
    jobs: int = 1
    _calibration: ThresholdCalibration | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.evaluator_id in self.ensemble_ids:
            raise ConfigError(f"Evaluator {self.evaluator_id!r} must be held out of the training ensemble")
        # build every extractor up front so worker threads only read the registry
        for model_id in [*self.ensemble_ids, self.evaluator_id]:
            self.registry.get(model_id)

    @classmethod
    def toy(cls, n_sources: int = 20, seed: int = 0, far: float = 0.01, jobs: int = 1) -> "StudySetup":
        """Synthetic faces, toy backend and four toy embedders (three train, one held out)."""
        faces = make_synthetic_faces(n_sources=n_sources, seed=seed)
        registry = ModelRegistry(toy_registry_doc(4, seed=seed))
        ids = registry.ids
        return cls(
            faces=faces,
            backend=ToyBackend(ToyBackendConfig(seed=seed)),
            codec=IdentityCodec(),
            registry=registry,
            ensemble_ids=ids[:3],
            evaluator_id=ids[3],
            far=far,
            jobs=jobs,
        )

    @property
    def ensemble(self) -> SurrogateEnsemble:
        return self.registry.ensemble(self.ensemble_ids)

    @property
    def evaluator(self) -> FeatureExtractor:
        return self.registry.get(self.evaluator_id)

    def calibration(self) -> ThresholdCalibration:
        if self._calibration is None:
            scores = impostor_scores(self.faces.gallery, self.faces.gallery_ids, self.evaluator)
            self._calibration = calibrate_threshold(ScoreSet(scores), self.far, self.evaluator_id)
        return self._calibration

    def protect_all(self, cfg: ProtectionConfig) -> list[ProtectedResult]:
        def run(index: int) -> ProtectedResult:
            protector = Protector(self.backend, self.codec, self.ensemble, cfg, FeatureCache(), progress=False)
            train, _ = self.faces.target_pair(index)
            return protector.protect(self.faces.sources[index], train)

        return map_jobs(run, list(range(len(self.faces))), self.jobs, desc="protect")

    def scores(self, images: Sequence[torch.Tensor]) -> list[float]:
        return similarity_scores(images, self.faces.test_targets(), self.evaluator)

    def psr(self, images: Sequence[torch.Tensor]) -> float:
        return psr_from_scores(self.scores(images), self.calibration().tau)

    def clean_psr(self) -> float:
        return self.psr(self.faces.sources)

    def fid_proxy(self, images: Sequence[torch.Tensor]) -> float:
        """FID between evaluator features of ``images`` and of the clean sources."""
        return fid(extract_features(images, self.evaluator), extract_features(self.faces.sources, self.evaluator))

    def per_image_fid(self, images: Sequence[torch.Tensor]) -> list[float]:
        return [self.fid_proxy_pair(x, src) for x, src in zip(images, self.faces.sources)]

    def fid_proxy_pair(self, image: torch.Tensor, source: torch.Tensor) -> float:
        return fid(extract_features([image], self.evaluator), extract_features([source], self.evaluator))


# Smoothing robustness
# ---------------------------------------------------------------------------


def smoothing_robustness(
    protected: Sequence[torch.Tensor],
    targets: torch.Tensor | Sequence[torch.Tensor],
    extractor: FeatureExtractor,
    calibration: ThresholdCalibration,
    kernels: Iterable[str] = DEFAULT_KERNELS,
) -> dict[str, float]:
    """PSR after each smoothing filter; the ``none`` entry is the unfiltered PSR."""
    if calibration.model_id and calibration.model_id != extractor.model_id:
        raise ConfigError(f"Threshold was calibrated for {calibration.model_id!r}, not {extractor.model_id!r}")
    parsed = [SmoothingKernel.parse(k) for k in kernels]
    table = {"none": psr_from_scores(similarity_scores(protected, targets, extractor), calibration.tau)}
    for kernel in parsed:
        filtered = [kernel.apply(x) for x in protected]
        table[kernel.name] = psr_from_scores(similarity_scores(filtered, targets, extractor), calibration.tau)
        logger.info("PSR after %s: %.2f", kernel.name, table[kernel.name])
    return table


# Purification survival
# ---------------------------------------------------------------------------


@dataclass
class SurvivalPoint:
    t: int
    variant: str
    psr_proxy: float
    fid_proxy: float
    clean_psr_proxy: float
    per_image_fid: list[float] = field(default_factory=list, repr=False)
    per_image_scores: list[float] = field(default_factory=list, repr=False)

    CSV_FIELDS = ("t", "variant", "psr_proxy", "fid_proxy", "clean_psr_proxy")


def purification_survival(
    setup: StudySetup,
    base_cfg: ProtectionConfig,
    t_grid: Sequence[int] = DEFAULT_T_GRID,
    variants: Sequence[str] = DEFAULT_VARIANTS,
) -> list[SurvivalPoint]:
    """PSR and FID proxies per (start timestep, variant)."""
    unknown = [v for v in variants if v not in VARIANT_SWITCHES]
    if unknown:
        raise ConfigError(f"Unknown variants {unknown}; expected {list(VARIANT_SWITCHES)}")
    clean = setup.clean_psr()
    points: list[SurvivalPoint] = []
    done: dict[str, SurvivalPoint] = {}
    for t in t_grid:
        for variant in variants:
            cfg = base_cfg.replace(t_start=t, **VARIANT_SWITCHES[variant])
            key = cfg.digest()
            if key not in done:
                images = [r.protected_image for r in setup.protect_all(cfg)]
                scores = setup.scores(images)
                done[key] = SurvivalPoint(
                    t=t,
                    variant=variant,
                    psr_proxy=psr_from_scores(scores, setup.calibration().tau),
                    fid_proxy=setup.fid_proxy(images),
                    clean_psr_proxy=clean,
                    per_image_fid=setup.per_image_fid(images),
                    per_image_scores=scores,
                )
            shared = done[key]
            points.append(
                SurvivalPoint(
                    t, variant, shared.psr_proxy, shared.fid_proxy, clean, shared.per_image_fid, shared.per_image_scores
                )
            )
            logger.info("t=%d %s: PSR %.2f, FID %.4g", t, variant, shared.psr_proxy, shared.fid_proxy)
    return points


def survival_gaps(points: Sequence[SurvivalPoint]) -> dict[int, float]:
    """PSR(with_null) - PSR(without_null) per start timestep."""
    by_key = {(p.t, p.variant): p.psr_proxy for p in points}
    return {
        t: by_key[(t, "with_null")] - by_key[(t, "without_null")]
        for t in sorted({p.t for p in points})
        if (t, "with_null") in by_key and (t, "without_null") in by_key
    }


# Lambda sweep
# ---------------------------------------------------------------------------


@dataclass
class LambdaPoint:
    lambda_adv: float
    psr_proxy: float
    fid_proxy: float
    adv_reduction: float
    final_structure: float

    CSV_FIELDS = ("lambda_adv", "psr_proxy", "fid_proxy", "adv_reduction", "final_structure")


def lambda_sweep(
    setup: StudySetup,
    base_cfg: ProtectionConfig,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
) -> list[LambdaPoint]:
    bad = [lam for lam in lambda_grid if lam <= 0]
    if bad:
        raise ConfigError(f"lambda_sweep needs positive weights, got {bad}")
    points = []
    for lam in lambda_grid:
        results = setup.protect_all(base_cfg.replace(lambda_adv=lam))
        images = [r.protected_image for r in results]
        point = LambdaPoint(
            lambda_adv=lam,
            psr_proxy=setup.psr(images),
            fid_proxy=setup.fid_proxy(images),
            adv_reduction=float(np.mean([r.loss_curves["adv"][0] - r.loss_curves["adv"][-1] for r in results])),
            final_structure=float(np.mean([r.loss_curves["str"][-1] for r in results])),
        )
        logger.info(
            "lambda=%g: adv reduction %.4g, final structure %.4g, PSR %.2f",
            lam,
            point.adv_reduction,
            point.final_structure,
            point.psr_proxy,
        )
        points.append(point)
    return points


# CSV output
# ---------------------------------------------------------------------------


def write_csv(rows: Sequence[Any], path: Path, fields: Sequence[str] | None = None) -> Path:
    """Write dataclass rows (or a dict table) with a fixed header row."""
    if isinstance(rows, dict):
        header = fields or ("kernel", "psr_proxy")
        body = [[key, repr(float(value))] for key, value in rows.items()]
    else:
        if not rows and not fields:
            raise ConfigError(f"No rows and no header for {path}")
        header = fields or rows[0].CSV_FIELDS
        body = [
            [repr(v) if isinstance(v, float) else v for v in (getattr(row, name) for name in header)] for row in rows
        ]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
    logger.info("Wrote %s", path)
    return path

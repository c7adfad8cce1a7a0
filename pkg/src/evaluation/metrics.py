"""Evaluation metrics: FAR-calibrated threshold, PSR, FID, PSNR, SSIM, smoothing adversaries."""

from __future__ import annotations

import itertools
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Hashable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg
from skimage.metrics import structural_similarity
from torchvision.transforms.functional import gaussian_blur

from src.exceptions import ConfigError, ShapeError
from src.recognition.surrogates import FeatureExtractor, cosine_similarity

logger = logging.getLogger(__name__)

RECOMMENDED_IMPOSTORS = 100
PSNR_CAP_DB = 100.0
FID_SHRINKAGE = 1e-6
SSIM_SIGMA = 1.5
SSIM_TAPS = 11


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().to(torch.float64).numpy()
    return np.asarray(x, dtype=np.float64)


# Thresholds and protection success rate
# ---------------------------------------------------------------------------


@dataclass
class ScoreSet:
    impostor: list[float]
    genuine: list[float] = field(default_factory=list)

    def __post_init__(self):
        for name in ("impostor", "genuine"):
            scores = np.asarray(getattr(self, name), dtype=np.float64)
            if scores.size and (not np.isfinite(scores).all() or np.abs(scores).max() > 1.0 + 1e-9):
                raise ConfigError(f"{name} scores must be finite cosine similarities in [-1, 1]")


@dataclass
class ThresholdCalibration:
    tau: float
    far: float
    empirical_far: float
    n_impostor: int
    model_id: str = ""

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def calibrate_threshold(scores: ScoreSet, far: float = 0.01, model_id: str = "") -> ThresholdCalibration:
    """Smallest tau with at most ``far`` of the impostor scores strictly above it.

    Acceptance is ``score > tau``; ties at tau count as rejections.
    """
    if not scores.impostor:
        raise ConfigError("Threshold calibration needs at least one impostor score")
    if not 0.0 <= far <= 1.0:
        raise ConfigError(f"far must lie in [0, 1], got {far}")
    n = len(scores.impostor)
    if n < RECOMMENDED_IMPOSTORS:
        logger.warning("Calibrating on %d impostor scores (fewer than %d)", n, RECOMMENDED_IMPOSTORS)

    ranked = np.sort(np.asarray(scores.impostor, dtype=np.float64))[::-1]
    allowed = math.floor(far * n + 1e-9)
    tau = -1.0 if allowed >= n else float(ranked[allowed])
    empirical = float(np.count_nonzero(ranked > tau)) / n
    logger.info("Calibrated tau=%.6f on %d impostor scores (empirical FAR %.4f)", tau, n, empirical)
    return ThresholdCalibration(tau=tau, far=far, empirical_far=empirical, n_impostor=n, model_id=model_id)


def impostor_scores(
    images: Sequence[torch.Tensor],
    identities: Sequence[Hashable],
    extractor: FeatureExtractor,
    pairs: Sequence[tuple[int, int]] | None = None,
) -> list[float]:
    """Cosine similarities over pairs of images of distinct identities.

    Without explicit ``pairs`` every cross-identity pair is used.
    """
    if len(images) != len(identities):
        raise ShapeError("Need one identity label per image")
    if pairs is None:
        pairs = [(i, j) for i, j in itertools.combinations(range(len(images)), 2) if identities[i] != identities[j]]
    with torch.no_grad():
        feats = [extractor.extract(x) for x in images]
    scores = []
    for i, j in pairs:
        if identities[i] == identities[j]:
            raise ConfigError(f"Impostor pair ({i}, {j}) shares identity {identities[i]}")
        scores.append(cosine_similarity(feats[i], feats[j]))
    return scores


def similarity_scores(
    images: Sequence[torch.Tensor], targets: torch.Tensor | Sequence[torch.Tensor], extractor: FeatureExtractor
) -> list[float]:
    if isinstance(targets, torch.Tensor):
        targets = [targets] * len(images)
    if len(targets) != len(images):
        raise ShapeError("Need one target image per protected image")
    with torch.no_grad():
        return [cosine_similarity(extractor.extract(x), extractor.extract(t)) for x, t in zip(images, targets)]


def psr_from_scores(scores: Sequence[float], tau: float) -> float:
    if not scores:
        return 0.0
    return 100.0 * sum(1 for s in scores if s > tau) / len(scores)


def psr(
    protected_images: Sequence[torch.Tensor],
    target_test: torch.Tensor | Sequence[torch.Tensor],
    extractor: FeatureExtractor,
    calibration: ThresholdCalibration,
) -> float:
    """Percentage of protected images whose similarity to the target test image exceeds tau."""
    if calibration.model_id and calibration.model_id != extractor.model_id:
        raise ConfigError(
            f"Threshold was calibrated for {calibration.model_id!r}, not {extractor.model_id!r}"
        )
    return psr_from_scores(similarity_scores(protected_images, target_test, extractor), calibration.tau)


# Image quality
# ---------------------------------------------------------------------------


class PSNRValue(NamedTuple):
    db: float
    capped: bool


def psnr(a, b, max_val: float = 1.0) -> PSNRValue:
    a, b = _as_numpy(a), _as_numpy(b)
    if a.shape != b.shape:
        raise ShapeError(f"PSNR needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNRValue(PSNR_CAP_DB, True)
    db = 20.0 * math.log10(max_val / math.sqrt(mse))
    if db > PSNR_CAP_DB:
        return PSNRValue(PSNR_CAP_DB, True)
    return PSNRValue(db, False)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM (sigma 1.5, 11 taps), averaged over windows and channels."""
    a, b = _as_numpy(a), _as_numpy(b)
    if a.shape != b.shape:
        raise ShapeError(f"SSIM needs equal shapes, got {a.shape} and {b.shape}")
    if a.ndim not in (2, 3):
        raise ShapeError("SSIM expects H x W or H x W x C images")
    side = min(a.shape[:2])
    win_size = None
    if side < SSIM_TAPS:
        win_size = side if side % 2 else side - 1
        logger.warning("Image side %d is below the SSIM window; cropping with %d", side, win_size)
    return float(
        structural_similarity(
            a,
            b,
            win_size=win_size,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=data_range,
            channel_axis=-1 if a.ndim == 3 else None,
        )
    )


def mean_psnr(images_a: Sequence, images_b: Sequence, max_val: float = 1.0) -> float:
    if len(images_a) != len(images_b) or not images_a:
        raise ShapeError("mean_psnr needs two non-empty sets of equal length")
    return float(np.mean([psnr(a, b, max_val).db for a, b in zip(images_a, images_b)]))


def mean_ssim(images_a: Sequence, images_b: Sequence, data_range: float = 1.0) -> float:
    if len(images_a) != len(images_b) or not images_a:
        raise ShapeError("mean_ssim needs two non-empty sets of equal length")
    return float(np.mean([ssim(a, b, data_range) for a, b in zip(images_a, images_b)]))


# Frechet distance
# ---------------------------------------------------------------------------


def _gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    d = features.shape[1]
    if features.shape[0] < 2:
        # one sample fits a point mass
        sigma = np.zeros((d, d))
    else:
        sigma = np.atleast_2d(np.cov(features, rowvar=False))
    return mu, sigma + FID_SHRINKAGE * np.eye(d)


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    covmean = linalg.sqrtm(sigma_a @ sigma_b)
    if np.iscomplexobj(covmean):
        if not np.allclose(np.diagonal(covmean).imag, 0, atol=1e-3):
            logger.warning("Matrix square root has a large imaginary part (%.3g)", np.abs(covmean.imag).max())
        covmean = covmean.real
    return float(np.trace(covmean))


def _feature_rows(features) -> np.ndarray:
    arr = _as_numpy(features)
    if arr.ndim == 1:
        # a flat vector is a set of scalar samples
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"Features must be a vector or a samples x dims matrix, got shape {arr.shape}")
    return arr


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    fa, fb = _feature_rows(features_a), _feature_rows(features_b)
    if fa.shape[0] == 0 or fb.shape[0] == 0:
        raise ShapeError("Feature sets must hold at least one sample")
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError(f"Feature dimension mismatch: {fa.shape} vs {fb.shape}")
    mu_a, sigma_a = _gaussian_fit(fa)
    mu_b, sigma_b = _gaussian_fit(fb)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * _trace_sqrt_product(sigma_a, sigma_b))
    return max(value, 0.0)


def extract_features(images: Sequence[torch.Tensor], extractor: FeatureExtractor) -> np.ndarray:
    with torch.no_grad():
        return np.stack([_as_numpy(extractor.extract(x)) for x in images])


# Smoothing adversaries
# ---------------------------------------------------------------------------

_KERNEL_RE = re.compile(r"^(gauss|mean)(\d+)$")
DEFAULT_KERNELS = ("gauss3", "gauss5", "gauss7", "mean5")


def gaussian_sigma(size: int) -> float:
    """Sigma used for a size x size Gaussian kernel when none is given."""
    return 0.3 * ((size - 1) / 2 - 1) + 0.8


@dataclass(frozen=True)
class SmoothingKernel:
    kind: str
    size: int

    @classmethod
    def parse(cls, name: str) -> "SmoothingKernel":
        if name == "identity":
            return cls("identity", 1)
        match = _KERNEL_RE.match(name)
        if not match:
            raise ConfigError(f"Unknown smoothing kernel {name!r}")
        size = int(match.group(2))
        if size < 1 or size % 2 == 0:
            raise ConfigError(f"Smoothing kernel size must be odd, got {size}")
        return cls(match.group(1), size)

    @property
    def name(self) -> str:
        return "identity" if self.kind == "identity" else f"{self.kind}{self.size}"

    def apply(self, image: torch.Tensor) -> torch.Tensor:
        """Filter an H x W x C image with reflect padding."""
        if self.kind == "identity" or self.size == 1:
            return image
        chw = image.permute(2, 0, 1)
        if self.kind == "gauss":
            sigma = gaussian_sigma(self.size)
            out = gaussian_blur(chw, kernel_size=[self.size, self.size], sigma=[sigma, sigma])
        else:
            pad = self.size // 2
            padded = F.pad(chw[None], (pad, pad, pad, pad), mode="reflect")
            out = F.avg_pool2d(padded, self.size, stride=1)[0]
        return out.permute(1, 2, 0).contiguous()


def smooth(image: torch.Tensor, kernel: str) -> torch.Tensor:
    return SmoothingKernel.parse(kernel).apply(image)


# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    psr_percent: dict[str, float]
    fid: float
    psnr_db: float
    ssim: float
    thresholds: dict[str, dict[str, Any]] = field(default_factory=dict)
    clean_psr_percent: dict[str, float] = field(default_factory=dict)
    robustness: dict[str, dict[str, float]] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for model_id, value in {**self.psr_percent, **self.clean_psr_percent}.items():
            if not 0.0 <= value <= 100.0:
                raise ConfigError(f"PSR for {model_id} outside [0, 100]: {value}")
        for name in ("fid", "psnr_db", "ssim"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} is not finite")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

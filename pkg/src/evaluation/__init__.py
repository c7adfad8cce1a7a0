from .ablations import (
    LambdaPoint,
    StudySetup,
    SurvivalPoint,
    lambda_sweep,
    purification_survival,
    smoothing_robustness,
    survival_gaps,
    write_csv,
)
from .metrics import (
    EvalReport,
    PSNRValue,
    ScoreSet,
    SmoothingKernel,
    ThresholdCalibration,
    calibrate_threshold,
    fid,
    impostor_scores,
    mean_psnr,
    mean_ssim,
    psnr,
    psr,
    smooth,
    ssim,
)
from .synthetic import SyntheticFaceSet, make_synthetic_faces

__all__ = [
    "EvalReport",
    "LambdaPoint",
    "PSNRValue",
    "ScoreSet",
    "SmoothingKernel",
    "StudySetup",
    "SurvivalPoint",
    "SyntheticFaceSet",
    "ThresholdCalibration",
    "calibrate_threshold",
    "fid",
    "impostor_scores",
    "lambda_sweep",
    "make_synthetic_faces",
    "mean_psnr",
    "mean_ssim",
    "psnr",
    "psr",
    "purification_survival",
    "smooth",
    "smoothing_robustness",
    "ssim",
    "survival_gaps",
    "write_csv",
]

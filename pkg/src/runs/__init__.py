from .batch import (
    ProtectionOutcome,
    RunComponents,
    cli_ablate,
    cli_evaluate,
    cli_invert,
    cli_protect,
    cli_visualize_attention,
)
from .manifest import DatasetManifest, GalleryImage, ManifestEntry
from .store import RunStore

__all__ = [
    "DatasetManifest",
    "GalleryImage",
    "ManifestEntry",
    "ProtectionOutcome",
    "RunComponents",
    "RunStore",
    "cli_ablate",
    "cli_evaluate",
    "cli_invert",
    "cli_protect",
    "cli_visualize_attention",
]

"""Dataset manifests: source images grouped by target identity.

A manifest is a JSON document::

    {
      "entries": [
        {"id": "face-000", "source": "faces/000.png", "group": 1,
         "target_train": "targets/g1_train.png", "target_test": "targets/g1_test.png"}
      ],
      "gallery": [{"path": "gallery/a0.png", "identity": "a"}],
      "impostor_pairs": [[0, 1]]
    }

Relative paths resolve against the manifest's directory. ``gallery`` and
``impostor_pairs`` are optional; without a gallery the sources and targets
calibrate the threshold, each source and each target group counting as its
own identity.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from src.config import config_digest
from src.exceptions import ConfigError

logger = logging.getLogger(__name__)

MAX_GROUPS = 4


@dataclass(frozen=True)
class ManifestEntry:
    entry_id: str
    source: Path
    group: int
    target_train: Path
    target_test: Path


@dataclass(frozen=True)
class GalleryImage:
    path: Path
    identity: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    gallery: list[GalleryImage] = field(default_factory=list)
    impostor_pairs: list[tuple[int, int]] | None = None
    digest: str = ""

    def __post_init__(self):
        ids = [e.entry_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("Manifest entry ids must be unique")
        targets: dict[int, tuple[Path, Path]] = {}
        for e in self.entries:
            if not 1 <= e.group <= MAX_GROUPS:
                raise ConfigError(f"Entry {e.entry_id}: group must lie in [1, {MAX_GROUPS}], got {e.group}")
            pair = (e.target_train, e.target_test)
            if targets.setdefault(e.group, pair) != pair:
                raise ConfigError(f"Group {e.group} has more than one target pair")
        if self.impostor_pairs is not None:
            n = len(self.gallery) if self.gallery else len(self.entries) + len(targets)
            for i, j in self.impostor_pairs:
                if not (0 <= i < n and 0 <= j < n) or i == j:
                    raise ConfigError(f"Impostor pair ({i}, {j}) is out of range for {n} images")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def groups(self) -> dict[int, tuple[Path, Path]]:
        return {e.group: (e.target_train, e.target_test) for e in self.entries}

    def calibration_images(self) -> tuple[list[Path], list[str]]:
        """Images and identity labels used for impostor scores."""
        if self.gallery:
            return [g.path for g in self.gallery], [g.identity for g in self.gallery]
        paths = [e.source for e in self.entries]
        labels = [f"source:{e.entry_id}" for e in self.entries]
        for group, (_, test) in sorted(self.groups.items()):
            paths.append(test)
            labels.append(f"target:{group}")
        return paths, labels

    @classmethod
    def from_dict(cls, doc: dict[str, Any], base_dir: Path, check_paths: bool = True) -> "DatasetManifest":
        if not isinstance(doc, dict) or not isinstance(doc.get("entries", []), list):
            raise ConfigError("Manifest must be an object with an 'entries' list")

        def resolve(value: Any, where: str) -> Path:
            if not isinstance(value, str) or not value:
                raise ConfigError(f"{where}: missing path")
            path = Path(value)
            path = path if path.is_absolute() else base_dir / path
            if check_paths and not path.is_file():
                raise ConfigError(f"{where}: file not found: {path}")
            return path

        entries = []
        for k, raw in enumerate(doc.get("entries", [])):
            where = f"entries[{k}]"
            try:
                group = int(raw["group"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{where}: missing or invalid group") from exc
            source = resolve(raw.get("source"), f"{where}.source")
            entries.append(
                ManifestEntry(
                    entry_id=str(raw.get("id") or source.stem),
                    source=source,
                    group=group,
                    target_train=resolve(raw.get("target_train"), f"{where}.target_train"),
                    target_test=resolve(raw.get("target_test"), f"{where}.target_test"),
                )
            )
        gallery = [
            GalleryImage(resolve(g.get("path"), f"gallery[{k}].path"), str(g.get("identity", "")))
            for k, g in enumerate(doc.get("gallery", []))
        ]
        pairs = doc.get("impostor_pairs")
        pairs = [(int(i), int(j)) for i, j in pairs] if pairs is not None else None
        return cls(entries, gallery, pairs, config_digest(doc))

    @classmethod
    def load(cls, path: Path, check_paths: bool = True) -> "DatasetManifest":
        if not path.is_file():
            raise ConfigError(f"Manifest not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Manifest {path} is not valid JSON: {exc}") from exc
        manifest = cls.from_dict(doc, path.parent, check_paths)
        logger.info("Loaded manifest %s: %d entries, %d groups", path.name, len(manifest), len(manifest.groups))
        return manifest

"""Run directories.

One directory per manifest entry::

    <runs>/<entry_id>/
        config.json                       merged run config + protection config echo
        embeddings/t001.npy ...           learned unconditional embeddings
        loss_curves.csv                   iteration, total, adv, str[, impersonation, obfuscation]
        protected.png
        reference_attention_digest.json
        result.json                       completion record, written last
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from src.images import load_image, save_image
from src.protector import ProtectedResult

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
CURVES_FILE = "loss_curves.csv"
PROTECTED_FILE = "protected.png"
DIGEST_FILE = "reference_attention_digest.json"
RESULT_FILE = "result.json"
EMBEDDINGS_DIR = "embeddings"

CURVE_ORDER = ("total", "adv", "str", "impersonation", "obfuscation")


def _write_json(path: Path, doc: dict[str, Any]) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_loss_curves(curves: dict[str, list[float]], path: Path) -> Path:
    names = [n for n in CURVE_ORDER if n in curves]
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iteration", *names])
        for k in range(len(curves["total"])):
            writer.writerow([k, *(repr(float(curves[n][k])) for n in names)])
    return path


def read_loss_curves(path: Path) -> dict[str, list[float]]:
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    return {name: [float(r[name]) for r in rows] for name in rows[0] if name != "iteration"}


@dataclass
class RunStore:
    root: Path

    def run_dir(self, entry_id: str) -> Path:
        return self.root / entry_id

    def record(self, entry_id: str) -> dict[str, Any] | None:
        path = self.run_dir(entry_id) / RESULT_FILE
        if not path.is_file():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            logger.warning("Ignoring unreadable completion record %s", path)
            return None

    def is_complete(self, entry_id: str, input_digest: str | None = None) -> bool:
        """True when the run finished; with a digest, only if it ran on the same inputs."""
        rec = self.record(entry_id)
        if rec is None or not (self.run_dir(entry_id) / PROTECTED_FILE).is_file():
            return False
        return input_digest is None or rec.get("input_digest") == input_digest

    def write(
        self,
        entry_id: str,
        result: ProtectedResult,
        run_config: dict[str, Any],
        input_digest: str,
    ) -> Path:
        run_dir = self.run_dir(entry_id)
        emb_dir = run_dir / EMBEDDINGS_DIR
        emb_dir.mkdir(parents=True, exist_ok=True)
        # drop a stale completion record before rewriting the artifacts
        (run_dir / RESULT_FILE).unlink(missing_ok=True)

        _write_json(run_dir / CONFIG_FILE, {"run": run_config, "protection": result.config})
        for t, emb in sorted(result.embeddings.embeddings.items()):
            np.save(emb_dir / f"t{t:03d}.npy", emb.values.detach().cpu().numpy())
        write_loss_curves(result.loss_curves, run_dir / CURVES_FILE)
        save_image(result.protected_image, run_dir / PROTECTED_FILE)
        _write_json(run_dir / DIGEST_FILE, {"sha256": result.reference_digest})
        _write_json(
            run_dir / RESULT_FILE,
            {
                "entry_id": entry_id,
                "input_digest": input_digest,
                "selected_iteration": result.selected_iteration,
                "final_loss": result.loss_curves["total"][-1],
                "wall_clock_s": result.wall_clock_s,
            },
        )
        logger.info("Wrote run %s", run_dir)
        return run_dir

    def load_protected(self, entry_id: str) -> torch.Tensor:
        return load_image(self.run_dir(entry_id) / PROTECTED_FILE)

    def load_embeddings(self, entry_id: str) -> dict[int, torch.Tensor]:
        emb_dir = self.run_dir(entry_id) / EMBEDDINGS_DIR
        return {int(p.stem[1:]): torch.from_numpy(np.load(p)) for p in sorted(emb_dir.glob("t*.npy"))}

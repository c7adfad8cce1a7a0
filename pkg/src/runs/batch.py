"""Batch drivers behind the CLI: protect, evaluate, invert, visualize, ablate."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from src.backends import create_backend, create_codec
from src.backends.base import DenoiserBackend, LatentCodec
from src.config import FEATURE_CACHE_DIR, SCHEMA_DIR, config_digest
from src.evaluation.ablations import (
    StudySetup,
    lambda_sweep,
    map_jobs,
    purification_survival,
    smoothing_robustness,
    write_csv,
)
from src.evaluation.metrics import (
    EvalReport,
    ScoreSet,
    calibrate_threshold,
    extract_features,
    fid,
    impostor_scores,
    psnr,
    psr,
    similarity_scores,
    ssim,
)
from src.exceptions import ConfigError, LatentCloakError, MissingRunsError, ReportSchemaError
from src.guidance.attention import render_components
from src.images import file_digest, load_image, save_image
from src.protector import ProtectionConfig, Protector
from src.recognition.registry import ModelRegistry, toy_registry_doc
from src.recognition.surrogates import FeatureCache, SurrogateEnsemble
from src.runs.manifest import DatasetManifest, ManifestEntry
from src.runs.store import RunStore

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

REPORT_SCHEMA = SCHEMA_DIR / "report.schema.json"

# run-config sections that change a protected image; runtime and evaluators do not
PROTECTION_SECTIONS = ("protection", "backend", "codec", "models", "ensemble")


@dataclass
class ProtectionOutcome:
    entry_id: str
    success: bool
    run_dir: str = ""
    error: str = ""
    skipped: bool = False


def protection_config(doc: dict[str, Any]) -> ProtectionConfig:
    """ProtectionConfig from the run config; the toy backend gets its native schedule."""
    section = dict(doc.get("protection", {}))
    if doc.get("backend", {}).get("id") == "toy":
        base = ProtectionConfig.for_toy().to_dict()
        base.update(section)
        section = base
    return ProtectionConfig.from_dict(section)


@dataclass
class RunComponents:
    doc: dict[str, Any]
    protection: ProtectionConfig
    backend: DenoiserBackend
    codec: LatentCodec
    registry: ModelRegistry
    ensemble_ids: list[str]
    evaluator_ids: list[str]
    far: float = 0.01
    jobs: int = 1
    digest: str = field(default="", init=False)

    def __post_init__(self):
        self.digest = config_digest({name: self.doc.get(name) for name in PROTECTION_SECTIONS})

    @classmethod
    def from_run_config(cls, doc: dict[str, Any]) -> "RunComponents":
        backend_doc, codec_doc = doc.get("backend", {}), doc.get("codec", {})
        backend = create_backend(backend_doc.get("id", "toy"), backend_doc.get("params"))
        codec = create_codec(codec_doc.get("id", "identity"), codec_doc.get("params"))
        if tuple(codec.latent_shape) != tuple(backend.latent_shape):
            raise ConfigError(f"Codec latent {codec.latent_shape} does not match backend latent {backend.latent_shape}")

        registry = ModelRegistry(doc.get("models") or toy_registry_doc(resolution=codec.image_shape[:2]))
        ids = registry.ids
        ensemble = list(doc.get("ensemble") or (ids[:-1] if len(ids) > 1 else ids))
        evaluators = list(doc.get("evaluators") or [i for i in ids if i not in ensemble])
        if not evaluators:
            logger.warning("No held-out model; evaluating on the training ensemble")
            evaluators = list(ensemble)
        for model_id in [*ensemble, *evaluators]:
            registry.get(model_id)

        runtime = doc.get("runtime", {})
        jobs = int(runtime.get("jobs", 1))
        far = float(runtime.get("far", 0.01))
        if jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {jobs}")
        if not 0.0 <= far <= 1.0:
            raise ConfigError(f"far must lie in [0, 1], got {far}")
        return cls(doc, protection_config(doc), backend, codec, registry, ensemble, evaluators, far, jobs)

    @property
    def ensemble(self) -> SurrogateEnsemble:
        return self.registry.ensemble(self.ensemble_ids)

    def protector(self) -> Protector:
        return Protector(self.backend, self.codec, self.ensemble, self.protection, FeatureCache(FEATURE_CACHE_DIR))


def entry_digest(entry: ManifestEntry, run_digest: str) -> str:
    doc = {
        "config": run_digest,
        "entry": entry.entry_id,
        "source": file_digest(entry.source),
        "target_train": file_digest(entry.target_train),
        "target_test": file_digest(entry.target_test),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


# protect
# ---------------------------------------------------------------------------


def cli_protect(manifest_path: Path, doc: dict[str, Any], out_dir: Path) -> tuple[int, list[ProtectionOutcome]]:
    """Protect every manifest entry into its own run directory.

    Entries whose run directory already holds a completed run on the same
    inputs are skipped.
    """
    manifest = DatasetManifest.load(manifest_path)
    if not manifest.entries:
        logger.warning("Manifest %s has no entries; nothing to do", manifest_path)
        return EXIT_OK, []
    components = RunComponents.from_run_config(doc)
    store = RunStore(out_dir)

    def run(entry: ManifestEntry) -> ProtectionOutcome:
        run_dir = store.run_dir(entry.entry_id)
        try:
            digest = entry_digest(entry, components.digest)
            if store.is_complete(entry.entry_id, digest):
                logger.info("Skipping %s: completed run found", entry.entry_id)
                return ProtectionOutcome(entry.entry_id, True, str(run_dir), skipped=True)
            x = load_image(entry.source)
            x_t = load_image(entry.target_train)
            result = components.protector().protect(x, x_t)
            store.write(entry.entry_id, result, doc, digest)
            logger.info("Protected %s (final loss %.4g)", entry.entry_id, result.loss_curves["total"][-1])
            return ProtectionOutcome(entry.entry_id, True, str(run_dir))
        except (LatentCloakError, OSError) as exc:
            logger.error("Entry %s failed: %s", entry.entry_id, exc)
            return ProtectionOutcome(entry.entry_id, False, str(run_dir), error=str(exc))
        except Exception as exc:
            logger.exception("Entry %s failed unexpectedly", entry.entry_id)
            return ProtectionOutcome(entry.entry_id, False, str(run_dir), error=f"{type(exc).__name__}: {exc}")

    outcomes = map_jobs(run, manifest.entries, components.jobs, desc="entries")
    failed = [o for o in outcomes if not o.success]
    skipped = sum(o.skipped for o in outcomes)
    logger.info("Done: %d ok (%d skipped), %d failed", len(outcomes) - len(failed), skipped, len(failed))
    return (EXIT_PARTIAL if failed else EXIT_OK), outcomes


# evaluate
# ---------------------------------------------------------------------------


def validate_report(doc: dict[str, Any], schema_path: Path = REPORT_SCHEMA) -> None:
    schema = json.loads(schema_path.read_text(encoding="utf-8"))
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise ReportSchemaError(f"Report does not match {schema_path.name}: {exc.message}") from exc


def cli_evaluate(
    manifest_path: Path,
    runs_dir: Path,
    doc: dict[str, Any],
    out_dir: Path | None = None,
) -> tuple[int, EvalReport]:
    """Score completed runs and write report.json, per_image.csv and robustness.csv."""
    manifest = DatasetManifest.load(manifest_path)
    if not manifest.entries:
        raise ConfigError(f"Manifest {manifest_path} has no entries to evaluate")
    store = RunStore(runs_dir)
    missing = [e.entry_id for e in manifest.entries if not store.is_complete(e.entry_id)]
    if missing:
        raise MissingRunsError(missing)
    components = RunComponents.from_run_config(doc)
    out_dir = out_dir or runs_dir

    protected = [store.load_protected(e.entry_id) for e in manifest.entries]
    sources = [load_image(e.source) for e in manifest.entries]
    tests = [load_image(e.target_test) for e in manifest.entries]
    cal_paths, cal_labels = manifest.calibration_images()
    cal_images = [load_image(p) for p in cal_paths]

    psr_percent, clean_percent, thresholds, robustness = {}, {}, {}, {}
    similarities: dict[str, list[float]] = {}
    for model_id in components.evaluator_ids:
        extractor = components.registry.get(model_id)
        scores = impostor_scores(cal_images, cal_labels, extractor, manifest.impostor_pairs)
        calibration = calibrate_threshold(ScoreSet(scores), components.far, model_id)
        thresholds[model_id] = calibration.to_dict()
        psr_percent[model_id] = psr(protected, tests, extractor, calibration)
        clean_percent[model_id] = psr(sources, tests, extractor, calibration)
        robustness[model_id] = smoothing_robustness(protected, tests, extractor, calibration)
        similarities[model_id] = similarity_scores(protected, tests, extractor)
        logger.info("%s: PSR %.2f (clean %.2f)", model_id, psr_percent[model_id], clean_percent[model_id])

    fid_model = components.evaluator_ids[0]
    fid_extractor = components.registry.get(fid_model)
    psnrs = [psnr(p, s) for p, s in zip(protected, sources)]
    ssims = [ssim(p, s) for p, s in zip(protected, sources)]
    report = EvalReport(
        psr_percent=psr_percent,
        fid=fid(extract_features(protected, fid_extractor), extract_features(sources, fid_extractor)),
        psnr_db=float(np.mean([v.db for v in psnrs])),
        ssim=float(np.mean(ssims)),
        thresholds=thresholds,
        clean_psr_percent=clean_percent,
        robustness=robustness,
        metadata={
            "manifest_digest": manifest.digest,
            "config_digest": config_digest(components.doc),
            "entries": len(manifest),
            "far": components.far,
            "proxy_metrics": components.backend.backend_id == "toy",
            "fid_model": fid_model,
            "evaluators": components.evaluator_ids,
        },
    )
    report_doc = report.to_dict()
    validate_report(report_doc)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with (out_dir / "per_image.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["entry_id", "psnr_db", "psnr_capped", "ssim", *(f"sim_{m}" for m in similarities)])
        for k, entry in enumerate(manifest.entries):
            sims = [repr(similarities[m][k]) for m in similarities]
            writer.writerow([entry.entry_id, repr(psnrs[k].db), psnrs[k].capped, repr(ssims[k]), *sims])
    with (out_dir / "robustness.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["model_id", "kernel", "psr_proxy" if report.metadata["proxy_metrics"] else "psr"])
        for model_id, table in robustness.items():
            for kernel, value in table.items():
                writer.writerow([model_id, kernel, repr(value)])
    logger.info("Wrote evaluation report to %s", out_dir)
    return EXIT_OK, report


# invert / visualize-attention
# ---------------------------------------------------------------------------


def _null_text_curves(curves: dict[int, list[float]], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["timestep", "iteration", "loss"])
        for t in sorted(curves, reverse=True):
            for k, value in enumerate(curves[t]):
                writer.writerow([t, k, repr(value)])


def cli_invert(image_path: Path, doc: dict[str, Any], out_dir: Path) -> int:
    """Stage 1 only: inversion plus embedding learning, with the reconstruction."""
    components = RunComponents.from_run_config(doc)
    ctx = components.protector().prepare(load_image(image_path))
    emb_dir = out_dir / "embeddings"
    emb_dir.mkdir(parents=True, exist_ok=True)
    for t, emb in sorted(ctx.embeddings.embeddings.items()):
        np.save(emb_dir / f"t{t:03d}.npy", emb.values.detach().cpu().numpy())
    save_image(ctx.reconstruction, out_dir / "reconstruction.png")
    _null_text_curves(ctx.embeddings.loss_curves, out_dir / "null_text_curves.csv")
    (out_dir / "schedule.json").write_text(ctx.schedule.to_json() + "\n", encoding="utf-8")
    logger.info(
        "Inverted %s to t=%d; reconstruction PSNR %.2f dB",
        image_path.name,
        ctx.config.t_start,
        psnr(ctx.reconstruction, ctx.source).db,
    )
    return EXIT_OK


def cli_visualize_attention(
    image_path: Path,
    doc: dict[str, Any],
    out_dir: Path,
    timestep: int | None = None,
    components_k: int = 3,
) -> int:
    """Render the top singular components of every reference attention map at one timestep."""
    components = RunComponents.from_run_config(doc)
    ctx = components.protector().prepare(load_image(image_path))
    t = ctx.config.t_start if timestep is None else timestep
    keys = [key for key in ctx.reference.keys() if key[0] == t]
    if not keys:
        raise ConfigError(f"No reference attention maps at timestep {t}")
    for _, layer, head in keys:
        attn = ctx.reference[(t, layer, head)]
        tokens = attn.shape[-1]
        side = int(round(tokens**0.5))
        grid = (side, side) if side * side == tokens else (1, tokens)
        prefix = f"t{t:03d}_{layer.replace('.', '_')}_h{head}"
        render_components(attn, min(components_k, tokens), grid, out_dir, prefix)
    return EXIT_OK


# ablate
# ---------------------------------------------------------------------------

ABLATIONS = ("purification", "lambda", "smoothing")


def cli_ablate(kind: str, doc: dict[str, Any], out_dir: Path, images: int = 20) -> int:
    """Run one toy study and write its plot-ready CSV."""
    if kind not in ABLATIONS:
        raise ConfigError(f"Unknown ablation {kind!r}; expected one of {ABLATIONS}")
    if doc.get("backend", {}).get("id", "toy") != "toy":
        raise ConfigError("Ablation studies run on the toy backend")
    cfg = protection_config(doc)
    runtime = doc.get("runtime", {})
    setup = StudySetup.toy(
        n_sources=images, seed=cfg.seed, far=float(runtime.get("far", 0.01)), jobs=int(runtime.get("jobs", 1))
    )
    if kind == "purification":
        write_csv(purification_survival(setup, cfg), out_dir / "purification_survival.csv")
    elif kind == "lambda":
        write_csv(lambda_sweep(setup, cfg), out_dir / "lambda_sweep.csv")
    else:
        protected = [r.protected_image for r in setup.protect_all(cfg)]
        table = smoothing_robustness(protected, setup.faces.test_targets(), setup.evaluator, setup.calibration())
        write_csv(table, out_dir / "smoothing_robustness.csv")
    return EXIT_OK

"""CLI entry point for latentcloak.

Usage:
    python main.py protect --manifest data/manifest.json [--config run.json] [--out runs/]
    python main.py evaluate --manifest data/manifest.json [--runs runs/] [--models toy-fr-3] [--far 0.01]
    python main.py ablate purification|lambda|smoothing [--images 20] [--out ablations/]
    python main.py invert face.png [--out inverted/]
    python main.py visualize-attention face.png [--timestep 3] [--components 3] [--out attention/]

Shared flags: --config, --backend, --models, --far, --jobs, --seed,
--full-inversion, --keep-best. A flag overrides the config file, which
overrides the defaults.

Exit codes: 0 success, 1 partial failure, 2 config error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any

from src.config import LOG_LEVEL, RUNS_DIR, load_config_file, merge_run_config
from src.exceptions import ConfigError, LatentCloakError, UnknownModelError
from src.runs.batch import (
    ABLATIONS,
    EXIT_CONFIG,
    EXIT_PARTIAL,
    cli_ablate,
    cli_evaluate,
    cli_invert,
    cli_protect,
    cli_visualize_attention,
)

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)


def _model_list(value: str) -> list[str]:
    ids = [v.strip() for v in value.split(",") if v.strip()]
    if not ids:
        raise argparse.ArgumentTypeError("expected a comma-separated list of model ids")
    return ids


def run_config(args: argparse.Namespace, models_key: str = "models") -> dict[str, Any]:
    flags = {
        "seed": args.seed,
        "full_inversion": args.full_inversion,
        "keep_best": args.keep_best,
        "backend": args.backend,
        models_key: args.models,
        "far": args.far,
        "jobs": args.jobs,
    }
    return merge_run_config(load_config_file(args.config), flags)


def cmd_protect(args: argparse.Namespace) -> int:
    """Protect every manifest entry."""
    code, outcomes = cli_protect(args.manifest, run_config(args), args.out)
    for o in outcomes:
        status = "SKIP" if o.skipped else ("OK" if o.success else f"FAIL ({o.error})")
        logger.info("  %s: %s", o.entry_id, status)
    return code


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Score completed runs against the held-out models."""
    code, report = cli_evaluate(args.manifest, args.runs, run_config(args, "evaluators"), args.out)
    for model_id, value in report.psr_percent.items():
        logger.info("  %s: PSR %.2f%% (clean %.2f%%)", model_id, value, report.clean_psr_percent[model_id])
    logger.info("  FID %.4f  PSNR %.2f dB  SSIM %.4f", report.fid, report.psnr_db, report.ssim)
    return code


def cmd_ablate(args: argparse.Namespace) -> int:
    return cli_ablate(args.kind, run_config(args), args.out, args.images)


def cmd_invert(args: argparse.Namespace) -> int:
    return cli_invert(args.image, run_config(args), args.out)


def cmd_visualize_attention(args: argparse.Namespace) -> int:
    return cli_visualize_attention(args.image, run_config(args), args.out, args.timestep, args.components)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="JSON run config")
    shared.add_argument("--backend", help="denoiser backend id (toy, ldm-adapter)")
    shared.add_argument("--models", type=_model_list, help="comma-separated model ids")
    shared.add_argument("--far", type=float, help="false acceptance rate for threshold calibration")
    shared.add_argument("--jobs", type=int, help="entries processed concurrently")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--full-inversion", action="store_true", default=None, help="invert all T steps")
    shared.add_argument("--keep-best", action="store_true", default=None, help="return the lowest-loss iterate")

    parser = argparse.ArgumentParser(prog="latentcloak", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("protect", parents=[shared], help="protect manifest entries")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, default=RUNS_DIR)
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("evaluate", parents=[shared], help="evaluate completed runs")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--runs", type=Path, default=RUNS_DIR)
    p.add_argument("--out", type=Path, default=None, help="report directory (default: the runs directory)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[shared], help="toy ablation studies")
    p.add_argument("kind", choices=ABLATIONS)
    p.add_argument("--images", type=int, default=20)
    p.add_argument("--out", type=Path, default=RUNS_DIR / "ablations")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("invert", parents=[shared], help="inversion and embedding learning only")
    p.add_argument("image", type=Path)
    p.add_argument("--out", type=Path, default=RUNS_DIR / "inverted")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("visualize-attention", parents=[shared], help="render attention components")
    p.add_argument("image", type=Path)
    p.add_argument("--timestep", type=int)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--out", type=Path, default=RUNS_DIR / "attention")
    p.set_defaults(func=cmd_visualize_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UnknownModelError) as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except LatentCloakError as exc:
        logger.error("%s", exc)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())

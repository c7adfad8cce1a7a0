import hashlib
import json
import os
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from src.exceptions import ConfigError

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent


def _read_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes")


def _read_optional_path(name: str) -> Path | None:
    value = os.getenv(name, "").strip()
    return Path(value) if value else None


# Local
RUNS_DIR = Path(os.getenv("LATENTCLOAK_RUNS_DIR", str(BASE_DIR / "runs")))
FEATURE_CACHE_DIR = _read_optional_path("LATENTCLOAK_CACHE")
SCHEMA_DIR = BASE_DIR / "schemas"

# Runtime
LOG_LEVEL = os.getenv("LATENTCLOAK_LOG_LEVEL", "INFO").upper()
SHOW_PROGRESS = _read_bool("LATENTCLOAK_PROGRESS", "true")
DEVICE = os.getenv("LATENTCLOAK_DEVICE", "cpu")

# Remote verification
VERIFY_URL = os.getenv("LATENTCLOAK_VERIFY_URL", "http://127.0.0.1:8765")
VERIFY_TOKEN = os.getenv("LATENTCLOAK_VERIFY_TOKEN", "")
VERIFY_TIMEOUT = float(os.getenv("LATENTCLOAK_VERIFY_TIMEOUT", "10"))

# Production diffusion adapter
LDM_MODEL = os.getenv("LATENTCLOAK_LDM_MODEL", "runwayml/stable-diffusion-v1-5")


# Run configuration documents
# ---------------------------------------------------------------------------

DEFAULT_RUN_CONFIG: dict[str, Any] = {
    "protection": {},
    "backend": {"id": "toy", "params": {}},
    "codec": {"id": "identity", "params": {}},
    "models": {},
    "ensemble": [],
    "evaluators": [],
    "runtime": {"far": 0.01, "jobs": 1},
}

# CLI flag name -> (section, key) it overrides in the run config document.
FLAG_TARGETS: dict[str, tuple[str, str]] = {
    "seed": ("protection", "seed"),
    "full_inversion": ("protection", "full_inversion"),
    "keep_best": ("protection", "keep_best"),
    "backend": ("backend", "id"),
    "models": ("", "ensemble"),
    "evaluators": ("", "evaluators"),
    "far": ("runtime", "far"),
    "jobs": ("runtime", "jobs"),
}


def load_config_file(path: Path | None) -> dict[str, Any]:
    """Read a JSON run config; a missing path means "all defaults"."""
    if path is None:
        return {}
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    unknown = sorted(set(doc) - set(DEFAULT_RUN_CONFIG))
    if unknown:
        raise ConfigError(f"Unknown config sections: {', '.join(unknown)}")
    return doc


def merge_run_config(file_doc: dict[str, Any], flags: dict[str, Any]) -> dict[str, Any]:
    """Merge defaults, the config file and CLI flags (flag > file > default).

    Flags set to None are treated as "not given".
    """
    merged = json.loads(json.dumps(DEFAULT_RUN_CONFIG))
    for section, value in file_doc.items():
        if isinstance(value, dict) and isinstance(merged.get(section), dict):
            merged[section].update(value)
        else:
            merged[section] = value

    for flag, value in flags.items():
        if value is None:
            continue
        if flag not in FLAG_TARGETS:
            raise ConfigError(f"Unknown config flag: {flag}")
        section, key = FLAG_TARGETS[flag]
        if section:
            merged[section][key] = value
        else:
            merged[key] = value
    return merged


def config_digest(doc: dict[str, Any]) -> str:
    """SHA-256 over canonical JSON; stable across key order."""
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

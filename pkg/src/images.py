"""PNG image I/O. Images are H x W x 3 float64 tensors in [0, 1]; files are 8-bit RGB."""

from __future__ import annotations

import base64
import hashlib
import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from src.exceptions import ConfigError


def from_pil(image: Image.Image) -> torch.Tensor:
    array = np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(array)


def to_pil(x: torch.Tensor) -> Image.Image:
    array = x.detach().cpu().to(torch.float64).clamp(0.0, 1.0).numpy()
    return Image.fromarray(np.rint(array * 255.0).astype(np.uint8))


def load_image(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as image:
            return from_pil(image)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"Cannot read image {path}: {exc}") from exc


def save_image(x: torch.Tensor, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    to_pil(x).save(path, format="PNG")
    return path


def png_bytes(x: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    to_pil(x).save(buf, format="PNG")
    return buf.getvalue()


def encode_b64(x: torch.Tensor) -> str:
    return base64.b64encode(png_bytes(x)).decode("ascii")


def decode_b64(payload: str) -> torch.Tensor:
    try:
        raw = base64.b64decode(payload, validate=True)
        with Image.open(io.BytesIO(raw)) as image:
            return from_pil(image)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"Payload is not a base64 PNG: {exc}") from exc


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()

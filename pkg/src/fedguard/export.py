"""Binary PGM (P5) image export and import."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .metrics import as_image

__all__ = ["export_pgm", "read_pgm", "to_bytes"]


def to_bytes(image) -> np.ndarray:
    """Quantise [0, 1] pixels to uint8 with round-half-up."""
    img = np.asarray(image, dtype=np.float64)
    return np.clip(np.floor(255.0 * img + 0.5), 0, 255).astype(np.uint8)


def export_pgm(image, path) -> None:
    img = as_image(image)
    h, w = img.shape
    payload = f"P5\n{w} {h}\n255\n".encode("ascii") + to_bytes(img).tobytes()
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write PGM to {path}: {exc.strerror}") from exc


_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _HEADER.match(data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    body = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end())
    return body.reshape(h, w) / 255.0

"""Image similarity (PSNR, SSIM) and summaries of per-round records.

Images are 2-D float arrays with values in [0, 1].
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["as_image", "psnr", "ssim", "mean_ssim", "mean_psnr", "summarize", "SSIM_WINDOW"]

SSIM_WINDOW = 8
_C1 = 0.01**2
_C2 = 0.03**2


def as_image(pixels, shape: Optional[tuple] = None) -> np.ndarray:
    img = np.asarray(pixels, dtype=np.float64)
    if shape is not None:
        if int(np.prod(shape)) != img.size:
            raise ValueError(f"{img.size} pixels do not fit shape {tuple(shape)}")
        img = img.reshape(shape)
    if img.ndim != 2:
        raise ValueError("image must be 2-D (height, width)")
    if img.size and (img.min() < 0.0 or img.max() > 1.0 or not np.all(np.isfinite(img))):
        raise ValueError("pixel values must lie in [0, 1]")
    return img


def _pair(a, b):
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak 1; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _window_stats(a, b, win):
    wa = sliding_window_view(a, (win, win)).reshape(-1, win * win)
    wb = sliding_window_view(b, (win, win)).reshape(-1, win * win)
    mu_a = wa.mean(axis=1)
    mu_b = wb.mean(axis=1)
    da = wa - mu_a[:, None]
    db = wb - mu_b[:, None]
    return mu_a, mu_b, (da * da).mean(axis=1), (db * db).mean(axis=1), (da * db).mean(axis=1)


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` uniform windows at stride 1.

    Uses population (1/N) moments and dynamic range 1.
    """
    a, b = _pair(a, b)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} is smaller than the {window}x{window} window")
    mu_a, mu_b, var_a, var_b, cov = _window_stats(a, b, window)
    num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def mean_ssim(images: np.ndarray, reference, shape) -> float:
    ref = as_image(reference, shape)
    return float(np.mean([ssim(as_image(x, shape), ref) for x in images]))


def mean_psnr(images: np.ndarray, reference, shape) -> float:
    ref = as_image(reference, shape)
    return float(np.mean([psnr(as_image(x, shape), ref) for x in images]))


def _stats(values):
    if not values:
        return None, None, None
    return float(np.mean(values)), float(np.min(values)), float(np.max(values))


def summarize(records: Sequence[dict], attack_window: Optional[tuple] = None) -> dict:
    """Collapse a record stream into one table row.

    ``attack_window`` is a half-open ``(first, end)`` round range; metrics
    over an empty window are None rather than zero.  When omitted it covers
    every record with ``attack_active`` set.
    """
    if not records:
        raise ValueError("no records to summarize")
    acc = [r["accuracy"] for r in records if r.get("accuracy") is not None]
    if attack_window is None:
        window = [r for r in records if r.get("attack_active")]
    else:
        lo, hi = attack_window
        window = [r for r in records if lo <= r["round"] < hi]
    mean_acc, min_acc, max_acc = _stats(acc)
    ps = [r["psnr"] for r in window if r.get("psnr") is not None]
    ss = [r["ssim"] for r in window if r.get("ssim") is not None]
    ind = [r["indicator"] for r in window]
    return {
        "rule": records[0].get("rule"),
        "rounds": len(records),
        "final_accuracy": acc[-1] if acc else None,
        "mean_accuracy": mean_acc,
        "min_accuracy": min_acc,
        "max_accuracy": max_acc,
        "indicator_rate": float(np.mean(ind)) if ind else None,
        "psnr": float(np.mean(ps)) if ps else None,
        "ssim": float(np.mean(ss)) if ss else None,
        "lpips": None,
    }

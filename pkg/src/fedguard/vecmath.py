"""Deterministic numerics over flat parameter vectors.

All reductions accumulate strictly left to right (row 0 first, coordinate 0
first) so results are bit-reproducible regardless of BLAS or SIMD choices.
Vectors are plain 1-D float64 numpy arrays; a batch of updates is an
``(n, dim)`` array.
"""

from __future__ import annotations

import math

import numpy as np

from ._validation import as_param_vector, check_same_dim, check_update_matrix

__all__ = [
    "l2_norm",
    "l2_distance",
    "mean_rows",
    "coordinate_median",
    "coordinate_trimmed_mean",
    "cosine_similarity",
    "linf_norm",
    "weighted_mean_rows",
]


def _sequential_sum_of_squares(v: np.ndarray) -> float:
    # cumsum is a sequential scan, unlike np.sum's pairwise reduction
    return float(np.cumsum(v * v)[-1])


def l2_norm(v) -> float:
    v = as_param_vector(v)
    return math.sqrt(_sequential_sum_of_squares(v))


def l2_distance(a, b) -> float:
    a = as_param_vector(a, "a")
    b = as_param_vector(b, "b")
    check_same_dim(a, b)
    return math.sqrt(_sequential_sum_of_squares(a - b))


def linf_norm(v) -> float:
    v = as_param_vector(v)
    return float(np.max(np.abs(v)))


def _row_sum(rows: np.ndarray) -> np.ndarray:
    acc = rows[0].copy()
    for r in rows[1:]:
        acc += r
    return acc


def mean_rows(updates) -> np.ndarray:
    """Unweighted arithmetic mean of the rows, summed in row order."""
    X = check_update_matrix(updates)
    return _row_sum(X) / X.shape[0]


def weighted_mean_rows(updates, weights) -> np.ndarray:
    X = check_update_matrix(updates)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (X.shape[0],) or np.any(w < 0):
        raise ValueError("weights must be one non-negative value per row")
    total = float(np.cumsum(w)[-1])
    if total <= 0.0:
        raise ValueError("weights must have a positive sum")
    return _row_sum(X * w[:, None]) / total


def coordinate_median(updates) -> np.ndarray:
    """Per-coordinate median; for even n the mean of the two middle values."""
    X = check_update_matrix(updates)
    n = X.shape[0]
    s = np.sort(X, axis=0)
    if n % 2 == 1:
        return s[n // 2].copy()
    return (s[n // 2 - 1] + s[n // 2]) / 2.0


def coordinate_trimmed_mean(updates, k: int) -> np.ndarray:
    """Drop the k largest and k smallest values per coordinate, average the rest.

    Kept values are accumulated in original row order, which makes ``k=0``
    bit-identical to :func:`mean_rows`.
    """
    X = check_update_matrix(updates)
    n = X.shape[0]
    k = int(k)
    if k < 0 or n <= 2 * k:
        raise ValueError(f"trimmed mean needs n > 2k >= 0 (n={n}, k={k})")
    if k == 0:
        return mean_rows(X)
    order = np.argsort(X, axis=0, kind="stable")
    rank = np.empty_like(order)
    cols = np.arange(X.shape[1])
    rank[order, cols] = np.arange(n)[:, None]
    keep = (rank >= k) & (rank < n - k)
    acc = np.zeros(X.shape[1])
    for i in range(n):
        acc = np.where(keep[i], acc + X[i], acc)
    return acc / (n - 2 * k)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 if either is the zero vector."""
    a = as_param_vector(a, "a")
    b = as_param_vector(b, "b")
    check_same_dim(a, b)
    sa = linf_norm(a)
    sb = linf_norm(b)
    if sa == 0.0 or sb == 0.0:
        return 0.0
    # cosine is scale-free; normalising first avoids under/overflow in the squares
    a = a / sa
    b = b / sb
    na = l2_norm(a)
    nb = l2_norm(b)
    dot = float(np.cumsum(a * b)[-1])
    return max(-1.0, min(1.0, dot / (na * nb)))

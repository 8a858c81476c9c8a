"""Input validation helpers shared by the numeric modules."""

from __future__ import annotations

import numpy as np


class DimensionMismatchError(ValueError):
    pass


def as_param_vector(values, name: str = "vector") -> np.ndarray:
    """Return ``values`` as a finite, non-empty, 1-D float64 array.

    A new read-only array is returned so callers can never mutate a vector
    that was handed to a rule or stored in a record.
    """
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must have dim >= 1")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def check_update_matrix(updates, name: str = "updates") -> np.ndarray:
    """Stack a non-empty sequence of equal-length vectors into an (n, dim) array."""
    if isinstance(updates, np.ndarray):
        if updates.ndim != 2:
            raise ValueError(f"{name} must be a 2-D array of shape (n, dim)")
        rows = list(updates)
    else:
        rows = list(updates)
    if not rows:
        raise ValueError(f"{name} must be non-empty")
    vecs = [as_param_vector(r, name) for r in rows]
    dim = vecs[0].shape[0]
    for v in vecs[1:]:
        if v.shape[0] != dim:
            raise DimensionMismatchError(
                f"{name}: dimension mismatch ({dim} vs {v.shape[0]})"
            )
    out = np.vstack(vecs)
    out.setflags(write=False)
    return out

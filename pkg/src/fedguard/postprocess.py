"""Client-side update post-processing: top-k sparsification, sign compression
and Gaussian differential privacy.

Stages apply to each client's delta before it reaches the aggregation rule.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from . import rng as rng_mod
from ._validation import as_param_vector
from .aggregation import PostStage
from .vecmath import l2_norm

__all__ = [
    "PostStage",
    "sparsify_topk",
    "sign_compress",
    "dp_gaussian",
    "apply_postprocess",
    "TopKSparsifier",
    "SignCompressor",
    "GaussianDP",
]


def sparsify_topk(v, p: float) -> np.ndarray:
    """Keep the ``ceil(p * dim)`` largest-magnitude coordinates, zero the rest.

    Ties in magnitude keep the lower index.
    """
    v = as_param_vector(v)
    if not 0.0 < p <= 1.0:
        raise ValueError("p must be in (0, 1]")
    dim = v.shape[0]
    # guard against p*dim landing a hair above an integer
    keep = min(dim, max(1, math.ceil(p * dim - 1e-9)))
    order = np.argsort(-np.abs(v), kind="stable")
    out = np.zeros_like(v)
    idx = order[:keep]
    out[idx] = v[idx]
    return out


def sign_compress(v) -> np.ndarray:
    v = as_param_vector(v)
    return np.sign(v) + 0.0  # + 0.0 turns -0.0 into 0.0


def dp_gaussian(v, clip: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Clip ``v`` to L2 norm ``clip`` and add N(0, (sigma * clip)^2) noise per coordinate."""
    v = as_param_vector(v)
    if not clip > 0:
        raise ValueError("clip must be > 0")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    norm = l2_norm(v)
    out = v * min(1.0, clip / norm) if norm > 0 else v.copy()
    if sigma > 0:
        out = out + rng.normal(0.0, sigma * clip, size=v.shape[0])
    return out


def apply_postprocess(delta, stages, seed: int, client_id: int, round_: int) -> np.ndarray:
    """Run a chain of :class:`PostStage` on one client's delta.

    DP noise for stage ``j`` comes from the (client, round, stage) substream.
    """
    out = as_param_vector(delta)
    for j, st in enumerate(stages):
        if st.name == "topk":
            out = sparsify_topk(out, st.p)
        elif st.name == "sign":
            out = sign_compress(out)
        elif st.name == "dp":
            stream = rng_mod.substream(seed, rng_mod.DP_NOISE, client_id, round_, j)
            out = dp_gaussian(out, st.clip, st.sigma, stream)
        else:
            raise ValueError(f"unknown stage {st.name!r}")
    return np.asarray(out)


class _RowwiseTransformer(TransformerMixin, BaseEstimator):
    """Applies a vector map to every row of ``X``; stateless apart from ``n_features_in_``."""

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        return self

    def _map(self, v, i):
        raise NotImplementedError

    def transform(self, X):
        X = check_array(X)
        return np.vstack([self._map(row, i) for i, row in enumerate(X)])


class TopKSparsifier(_RowwiseTransformer):
    def __init__(self, p: float = 0.1):
        self.p = p

    def _map(self, v, i):
        return sparsify_topk(v, self.p)


class SignCompressor(_RowwiseTransformer):
    def _map(self, v, i):
        return sign_compress(v)


class GaussianDP(_RowwiseTransformer):
    """Row ``i`` draws noise from the substream keyed by ``(seed, i)``."""

    def __init__(self, clip: float = 1.0, sigma: float = 0.0, seed: int = 0):
        self.clip = clip
        self.sigma = sigma
        self.seed = seed

    def _map(self, v, i):
        return dp_gaussian(v, self.clip, self.sigma, rng_mod.substream(self.seed, rng_mod.DP_NOISE, i))

"""Server-side aggregation rules.

Every rule takes a batch of client updates, either a list of
:class:`ClientUpdate` or an ``(n, dim)`` array whose row ``i`` belongs to
client ``i``, and returns an :class:`AggregationOutcome`.  Batches are
processed in ascending client-id order, which fixes both the summation order
and every tie-break, so permuting the input batch never changes the
aggregate.

The estimator classes at the bottom wrap the functions in the
scikit-learn ``get_params``/``fit`` convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_param_vector, check_update_matrix
from .vecmath import (
    coordinate_median,
    coordinate_trimmed_mean,
    cosine_similarity,
    l2_distance,
    l2_norm,
    mean_rows,
    weighted_mean_rows,
)

__all__ = [
    "ClientUpdate",
    "AggregationOutcome",
    "PostStage",
    "RuleConfig",
    "RULES",
    "SELECTING_RULES",
    "infer_guard",
    "fedavg",
    "median_rule",
    "trim_rule",
    "multi_krum",
    "krum_scores",
    "bulyan",
    "afa",
    "fltrust",
    "aggregate",
    "InferGuard",
    "FedAvg",
    "CoordinateMedian",
    "TrimmedMean",
    "MultiKrum",
    "Bulyan",
    "AFA",
    "FLTrust",
]


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round: int
    delta: np.ndarray

    def __post_init__(self):
        if self.client_id < 0 or self.round < 0:
            raise ValueError("client_id and round must be non-negative")
        object.__setattr__(self, "delta", as_param_vector(self.delta, "delta"))


@dataclass(frozen=True)
class AggregationOutcome:
    aggregate: np.ndarray
    accepted: frozenset
    distances: Optional[dict] = None
    anchor: Optional[np.ndarray] = None
    # False for rules with no notion of selecting clients (accepted is everyone)
    selects: bool = True

    def as_record(self) -> dict:
        return {
            "accepted": sorted(int(i) for i in self.accepted),
            "selects": self.selects,
        }


def _unpack(updates) -> tuple[np.ndarray, np.ndarray]:
    """Return (ids, X) sorted by client id."""
    if isinstance(updates, np.ndarray):
        X = check_update_matrix(updates)
        return np.arange(X.shape[0]), X
    updates = list(updates)
    if not updates:
        raise ValueError("updates must be non-empty")
    if isinstance(updates[0], ClientUpdate):
        ids = [u.client_id for u in updates]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique within a batch")
        order = sorted(range(len(updates)), key=lambda i: ids[i])
        X = check_update_matrix([updates[i].delta for i in order])
        return np.array([ids[i] for i in order]), X
    X = check_update_matrix(updates)
    return np.arange(X.shape[0]), X


def _ids(ids, mask_or_idx) -> frozenset:
    return frozenset(int(i) for i in np.asarray(ids)[mask_or_idx])


def infer_guard(updates, lam: float = 2.0) -> AggregationOutcome:
    """Median-anchored L2 filter.

    Updates within ``lam * ||median||`` of the coordinate-wise median are
    averaged.  If none qualify, the single update closest to the median is
    used (lowest client id on ties).
    """
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    ids, X = _unpack(updates)
    anchor = coordinate_median(X)
    dist = np.array([l2_distance(x, anchor) for x in X])
    threshold = lam * l2_norm(anchor)
    keep = dist <= threshold
    if not keep.any():
        keep = np.zeros(len(ids), dtype=bool)
        keep[int(np.argmin(dist))] = True  # argmin returns the first minimum
    agg = mean_rows(X[keep])
    return AggregationOutcome(
        aggregate=agg,
        accepted=_ids(ids, keep),
        distances={int(i): float(d) for i, d in zip(ids, dist)},
        anchor=anchor,
    )


def fedavg(updates) -> AggregationOutcome:
    ids, X = _unpack(updates)
    return AggregationOutcome(mean_rows(X), _ids(ids, slice(None)), selects=False)


def median_rule(updates) -> AggregationOutcome:
    ids, X = _unpack(updates)
    med = coordinate_median(X)
    return AggregationOutcome(med, _ids(ids, slice(None)), anchor=med, selects=False)


def trim_rule(updates, k: int = 1) -> AggregationOutcome:
    ids, X = _unpack(updates)
    return AggregationOutcome(coordinate_trimmed_mean(X, k), _ids(ids, slice(None)), selects=False)


def _sq_dist_matrix(X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = l2_distance(X[i], X[j]) ** 2
    return D


def krum_scores(X: np.ndarray, f: int, min_neighbors: int = 0) -> np.ndarray:
    """Sum of squared distances from each row to its ``n - f - 2`` nearest others."""
    n = X.shape[0]
    n_nb = min(max(n - f - 2, min_neighbors), n - 1)
    D = _sq_dist_matrix(X)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(D[i], i))
        scores[i] = float(np.cumsum(others[:n_nb])[-1]) if n_nb > 0 else 0.0
    return scores


def multi_krum(updates, f: int = 1, m: Optional[int] = None) -> AggregationOutcome:
    ids, X = _unpack(updates)
    n = X.shape[0]
    if n < f + 3:
        raise ValueError(f"multi-krum needs n >= f + 3 (n={n}, f={f})")
    if m is None:
        m = n - f - 2
    if not 1 <= m <= n - f - 2:
        raise ValueError(f"multi-krum needs 1 <= m <= n - f - 2 (m={m})")
    scores = krum_scores(X, f)
    chosen = np.sort(np.argsort(scores, kind="stable")[:m])
    return AggregationOutcome(
        aggregate=mean_rows(X[chosen]),
        accepted=_ids(ids, chosen),
        distances={int(i): float(s) for i, s in zip(ids, scores)},
    )


def bulyan(updates, f: int = 1) -> AggregationOutcome:
    """Repeated Krum selection of ``n - 2f`` updates, then a trimmed mean with ``k = f``.

    The inner Krum always scores against at least one neighbour; with zero
    neighbours every score would tie and the lowest id would win regardless
    of where it sits.
    """
    ids, X = _unpack(updates)
    n = X.shape[0]
    if n < 4 * f + 3:
        raise ValueError(f"bulyan needs n >= 4f + 3 (n={n}, f={f})")
    theta = n - 2 * f
    remaining = list(range(n))
    selected = []
    for _ in range(theta):
        scores = krum_scores(X[remaining], f, min_neighbors=1)
        pick = remaining[int(np.argmin(scores))]
        selected.append(pick)
        remaining.remove(pick)
    selected.sort()
    agg = coordinate_trimmed_mean(X[selected], f)
    return AggregationOutcome(agg, _ids(ids, selected))


def afa(updates, anchor_weights: Optional[Sequence[float]] = None, xi: float = 1.0) -> AggregationOutcome:
    """Adaptive federated averaging with a low-side cosine-similarity cut."""
    ids, X = _unpack(updates)
    n = X.shape[0]
    w = np.ones(n) if anchor_weights is None else np.asarray(anchor_weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("anchor_weights must be n non-negative values with positive sum")
    good = list(range(n))
    sims = np.zeros(n)
    while True:
        centre = weighted_mean_rows(X[good], w[good])
        sims = np.array([cosine_similarity(X[i], centre) for i in good])
        mu = float(np.mean(sims))
        sd = float(np.std(sims))
        drop = sims < mu - xi * sd
        if not drop.any():
            break
        survivors = [g for g, d in zip(good, drop) if not d]
        if not survivors:
            survivors = [good[int(np.argmax(sims))]]
            good = survivors
            break
        good = survivors
    agg = weighted_mean_rows(X[good], w[good])
    return AggregationOutcome(agg, _ids(ids, good))


def fltrust(updates, root_update) -> AggregationOutcome:
    """Trust-weighted mean of updates rescaled to the server's root-update norm."""
    root = as_param_vector(root_update, "root_update")
    root_norm = l2_norm(root)
    if root_norm == 0.0:
        raise ValueError("root_update must be non-zero")
    ids, X = _unpack(updates)
    if X.shape[1] != root.shape[0]:
        raise ValueError("root_update dimension does not match updates")
    trust = np.array([max(0.0, cosine_similarity(x, root)) for x in X])
    norms = np.array([l2_norm(x) for x in X])
    total = float(np.cumsum(trust)[-1])
    if total == 0.0:
        return AggregationOutcome(root.copy(), frozenset(), distances={int(i): 0.0 for i in ids})
    acc = np.zeros(X.shape[1])
    for x, t, nx in zip(X, trust, norms):
        if t > 0.0 and nx > 0.0:
            acc = acc + (t * (root_norm / nx)) * x
    return AggregationOutcome(
        aggregate=acc / total,
        accepted=_ids(ids, trust > 0.0),
        distances={int(i): float(t) for i, t in zip(ids, trust)},
    )


@dataclass(frozen=True)
class PostStage:
    """One client-side post-processing step: ``topk``, ``sign`` or ``dp``."""

    name: str
    p: float = 0.1
    clip: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.name not in ("topk", "sign", "dp"):
            raise ValueError(f"unknown post-processing stage {self.name!r}")
        if self.name == "topk" and not 0.0 < self.p <= 1.0:
            raise ValueError("topk fraction p must be in (0, 1]")
        if self.name == "dp" and not (self.clip > 0 and self.sigma >= 0):
            raise ValueError("dp needs clip > 0 and sigma >= 0")


RULES = ("inferguard", "fedavg", "median", "trim", "multikrum", "bulyan", "afa", "fltrust")
SELECTING_RULES = frozenset({"inferguard", "multikrum", "bulyan", "afa", "fltrust"})


@dataclass(frozen=True)
class RuleConfig:
    name: str = "inferguard"
    lam: float = 2.0
    k: int = 1
    f: int = 1
    m: Optional[int] = None
    postprocess: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.name not in RULES:
            raise ValueError(f"unknown rule {self.name!r}; expected one of {', '.join(RULES)}")
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if self.k < 0 or self.f < 0:
            raise ValueError("k and f must be non-negative")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be >= 1")
        object.__setattr__(self, "postprocess", tuple(self.postprocess))

    def check_clients(self, n: int) -> None:
        """Raise if the rule cannot run on ``n`` clients."""
        if self.name == "trim" and n <= 2 * self.k:
            raise ValueError(f"trim needs n > 2k (n={n}, k={self.k})")
        if self.name == "multikrum":
            if n < self.f + 3:
                raise ValueError(f"multikrum needs n >= f + 3 (n={n}, f={self.f})")
            if self.m is not None and self.m > n - self.f - 2:
                raise ValueError(f"multikrum needs m <= n - f - 2 (m={self.m})")
        if self.name == "bulyan" and n < 4 * self.f + 3:
            raise ValueError(f"bulyan needs n >= 4f + 3 (n={n}, f={self.f})")


def aggregate(updates, config: RuleConfig, root_update=None) -> AggregationOutcome:
    name = config.name
    if name == "inferguard":
        return infer_guard(updates, config.lam)
    if name == "fedavg":
        return fedavg(updates)
    if name == "median":
        return median_rule(updates)
    if name == "trim":
        return trim_rule(updates, config.k)
    if name == "multikrum":
        return multi_krum(updates, config.f, config.m)
    if name == "bulyan":
        return bulyan(updates, config.f)
    if name == "afa":
        return afa(updates)
    if name == "fltrust":
        if root_update is None:
            raise ValueError("fltrust needs a root update")
        return fltrust(updates, root_update)
    raise ValueError(f"unknown rule {name!r}")


# -- estimator interface ------------------------------------------------------


class _AggregatorBase(BaseEstimator):
    """``fit(X)`` aggregates the rows of ``X`` (one row per client).

    Fitted attributes: ``aggregate_``, ``accepted_``, ``distances_``,
    ``anchor_`` and ``outcome_``.
    """

    def _aggregate(self, X) -> AggregationOutcome:
        raise NotImplementedError

    def fit(self, X, y=None):
        out = self._aggregate(X)
        self.outcome_ = out
        self.aggregate_ = out.aggregate
        self.accepted_ = np.array(sorted(out.accepted), dtype=int)
        self.distances_ = out.distances
        self.anchor_ = out.anchor
        self.n_features_in_ = out.aggregate.shape[0]
        return self

    def aggregate(self, X) -> np.ndarray:
        return self.fit(X).aggregate_


class InferGuard(_AggregatorBase):
    def __init__(self, lam: float = 2.0):
        self.lam = lam

    def _aggregate(self, X):
        return infer_guard(X, self.lam)


class FedAvg(_AggregatorBase):
    def _aggregate(self, X):
        return fedavg(X)


class CoordinateMedian(_AggregatorBase):
    def _aggregate(self, X):
        return median_rule(X)


class TrimmedMean(_AggregatorBase):
    def __init__(self, k: int = 1):
        self.k = k

    def _aggregate(self, X):
        return trim_rule(X, self.k)


class MultiKrum(_AggregatorBase):
    def __init__(self, f: int = 1, m: Optional[int] = None):
        self.f = f
        self.m = m

    def _aggregate(self, X):
        return multi_krum(X, self.f, self.m)


class Bulyan(_AggregatorBase):
    def __init__(self, f: int = 1):
        self.f = f

    def _aggregate(self, X):
        return bulyan(X, self.f)


class AFA(_AggregatorBase):
    def __init__(self, xi: float = 1.0, anchor_weights: Optional[Iterable[float]] = None):
        self.xi = xi
        self.anchor_weights = anchor_weights

    def _aggregate(self, X):
        w = None if self.anchor_weights is None else list(self.anchor_weights)
        return afa(X, w, self.xi)


class FLTrust(_AggregatorBase):
    def __init__(self, root_update=None):
        self.root_update = root_update

    def _aggregate(self, X):
        if self.root_update is None:
            raise ValueError("FLTrust needs root_update")
        return fltrust(X, self.root_update)

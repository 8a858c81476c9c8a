"""Softmax classifiers over flat parameter vectors, with hand-written gradients.

Two architectures are supported:

* ``logistic``: multinomial logistic regression, params ``[W (in x C), b (C)]``
* ``mlp``: one tanh hidden layer, params ``[W1 (in x H), b1 (H), W2 (H x C), b2 (C)]``

Both flatten row-major in the order listed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import Dataset

__all__ = [
    "ModelSpec",
    "TrainConfig",
    "EmptyShardWarning",
    "init_params",
    "logits",
    "forward_loss",
    "backward",
    "input_gradient",
    "sgd",
    "local_train",
    "evaluate",
    "SoftmaxRegression",
    "TanhMLPClassifier",
]


class EmptyShardWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2 or self.hidden < 1:
            raise ValueError("input_dim >= 1, num_classes >= 2 and hidden >= 1 required")

    @property
    def n_params(self) -> int:
        d, c, h = self.input_dim, self.num_classes, self.hidden
        if self.kind == "logistic":
            return (d + 1) * c
        return (d + 1) * h + (h + 1) * c


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 32
    local_epochs: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be >= 1")


def _split(spec: ModelSpec, params: np.ndarray):
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden
    if spec.kind == "logistic":
        return params[: d * c].reshape(d, c), params[d * c :]
    i = 0
    W1 = params[i : i + d * h].reshape(d, h)
    i += d * h
    b1 = params[i : i + h]
    i += h
    W2 = params[i : i + h * c].reshape(h, c)
    i += h * c
    return W1, b1, W2, params[i:]


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Zeros for logistic; Glorot-uniform weights and zero biases for the MLP."""
    if spec.kind == "logistic":
        return np.zeros(spec.n_params)
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden
    a1 = np.sqrt(6.0 / (d + h))
    a2 = np.sqrt(6.0 / (h + c))
    return np.concatenate(
        [rng.uniform(-a1, a1, d * h), np.zeros(h), rng.uniform(-a2, a2, h * c), np.zeros(c)]
    )


def _batch(batch):
    if isinstance(batch, Dataset):
        return batch.X, batch.y
    X, y = batch
    return np.atleast_2d(np.asarray(X, dtype=np.float64)), np.asarray(y, dtype=np.int64)


def _forward(spec, params, X):
    parts = _split(spec, params)
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"expected {spec.input_dim} features, got {X.shape[1]}")
    if spec.kind == "logistic":
        W, b = parts
        return X @ W + b, None
    W1, b1, W2, b2 = parts
    H = np.tanh(X @ W1 + b1)
    return H @ W2 + b2, H


def _log_softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def logits(spec: ModelSpec, params, X) -> np.ndarray:
    return _forward(spec, params, np.atleast_2d(np.asarray(X, dtype=np.float64)))[0]


def forward_loss(spec: ModelSpec, params, batch) -> tuple:
    """Mean softmax cross-entropy over ``batch``; returns ``(loss, logits)``."""
    X, y = _batch(batch)
    Z, _ = _forward(spec, params, X)
    logp = _log_softmax(Z)
    loss = -float(np.mean(logp[np.arange(y.shape[0]), y]))
    return loss, Z


def _dlogits(Z, y):
    P = np.exp(_log_softmax(Z))
    P[np.arange(y.shape[0]), y] -= 1.0
    return P / y.shape[0]


def backward(spec: ModelSpec, params, batch) -> np.ndarray:
    """Gradient of :func:`forward_loss` with respect to ``params``."""
    X, y = _batch(batch)
    Z, H = _forward(spec, params, X)
    G = _dlogits(Z, y)
    if spec.kind == "logistic":
        return np.concatenate([(X.T @ G).ravel(), G.sum(axis=0)])
    _, _, W2, _ = _split(spec, params)
    dH = (G @ W2.T) * (1.0 - H * H)
    return np.concatenate([(X.T @ dH).ravel(), dH.sum(axis=0), (H.T @ G).ravel(), G.sum(axis=0)])


def input_gradient(spec: ModelSpec, params, batch) -> np.ndarray:
    """Gradient of :func:`forward_loss` with respect to the inputs, shape (batch, input_dim)."""
    X, y = _batch(batch)
    Z, H = _forward(spec, params, X)
    G = _dlogits(Z, y)
    parts = _split(spec, params)
    if spec.kind == "logistic":
        return G @ parts[0].T
    W1, _, W2, _ = parts
    return ((G @ W2.T) * (1.0 - H * H)) @ W1.T


def sgd(spec: ModelSpec, params, data: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Mini-batch SGD for ``cfg.local_epochs`` epochs; returns the end parameters.

    One permutation is drawn from ``rng`` per epoch and nothing else, so two
    chained calls consume the stream exactly as one call with twice the epochs.
    """
    p = np.array(params, dtype=np.float64, copy=True)
    n = len(data)
    for _ in range(cfg.local_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            p -= cfg.lr * backward(spec, p, (data.X[idx], data.y[idx]))
    return p


def local_train(spec: ModelSpec, start_params, shard: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Train from ``start_params`` on ``shard`` and return ``end - start``.

    An empty shard yields a zero delta and an :class:`EmptyShardWarning`.
    """
    start = np.asarray(start_params, dtype=np.float64)
    if len(shard) == 0:
        warnings.warn("local_train called with an empty shard", EmptyShardWarning, stacklevel=2)
        return np.zeros_like(start)
    return sgd(spec, start, shard, cfg, rng) - start


def evaluate(spec: ModelSpec, params, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    pred = np.argmax(logits(spec, params, test.X), axis=1)
    return float(np.mean(pred == test.y))


# -- estimator interface ------------------------------------------------------


class _SoftmaxClassifierBase(ClassifierMixin, BaseEstimator):
    def _spec(self, n_features, n_classes) -> ModelSpec:
        raise NotImplementedError

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least two classes")
        yi = np.searchsorted(self.classes_, y)
        self.spec_ = self._spec(X.shape[1], self.classes_.shape[0])
        rng = np.random.default_rng(self.random_state)
        data = Dataset(np.clip(X, 0.0, 1.0), yi, self.spec_.num_classes)
        cfg = TrainConfig(self.lr, self.batch_size, self.epochs)
        self.coef_ = sgd(self.spec_, init_params(self.spec_, rng), data, cfg, rng)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = check_array(X)
        return logits(self.spec_, self.coef_, X)

    def predict_proba(self, X):
        return np.exp(_log_softmax(self.decision_function(X)))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class SoftmaxRegression(_SoftmaxClassifierBase):
    """Multinomial logistic regression trained by plain mini-batch SGD.

    Features are expected in [0, 1] and are clipped into that range on fit.
    """

    def __init__(self, lr=0.05, batch_size=32, epochs=50, random_state=0):
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _spec(self, n_features, n_classes):
        return ModelSpec("logistic", n_features, n_classes)


class TanhMLPClassifier(_SoftmaxClassifierBase):
    def __init__(self, hidden=32, lr=0.05, batch_size=32, epochs=50, random_state=0):
        self.hidden = hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _spec(self, n_features, n_classes):
        return ModelSpec("mlp", n_features, n_classes, self.hidden)

"""Malicious-client behaviours.

``gan_infer`` follows the generator-vs-global-model scheme: a small MLP
generator is trained so the frozen global classifier assigns its outputs to
the target label, and those outputs are then fed back into the attacker's
local training under a decoy label it does own.  ``adaptive_gan_infer``
additionally keeps the attacker's weights inside an l-infinity ball around
the global weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._validation import as_param_vector, check_same_dim
from .datasets import Dataset
from .models import ModelSpec, TrainConfig, input_gradient, local_train

__all__ = [
    "ATTACK_KINDS",
    "AttackConfig",
    "GeneratorState",
    "craft_sign_flip",
    "craft_scale",
    "init_generator",
    "generate",
    "decoy_label",
    "gan_infer_step",
    "adaptive_project",
    "adaptive_gan_infer_step",
]

ATTACK_KINDS = ("none", "sign_flip", "scale", "gan_infer", "adaptive_gan_infer")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    start_round: int = 50
    target_label: int = 3
    scale: float = 10.0
    tau: float = 0.0016
    latent_dim: int = 16
    gen_hidden: int = 64
    gen_steps: int = 20
    gen_lr: float = 5.0
    gen_batch: int = 32
    # generated images appended to the attacker's shard each round
    poison_count: int = 64

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {', '.join(ATTACK_KINDS)}")
        if self.start_round < 0:
            raise ValueError("start_round must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.target_label < 0:
            raise ValueError("target_label must be >= 0")
        if min(self.latent_dim, self.gen_hidden, self.gen_batch, self.poison_count) < 1 or self.gen_steps < 0:
            raise ValueError("generator sizes must be positive")

    @property
    def is_gan(self) -> bool:
        return self.kind in ("gan_infer", "adaptive_gan_infer")

    def active(self, round_: int) -> bool:
        return self.kind != "none" and round_ >= self.start_round


def craft_sign_flip(benign_delta, scale: float) -> np.ndarray:
    return -scale * as_param_vector(benign_delta)


def craft_scale(benign_delta, scale: float) -> np.ndarray:
    return scale * as_param_vector(benign_delta)


# -- generator ----------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorState:
    """Parameters of a latent -> tanh hidden -> sigmoid image MLP."""

    params: np.ndarray
    latent_dim: int
    hidden: int
    output_dim: int
    stream_id: int = 0
    steps_taken: int = 0

    def _split(self):
        z, h, o = self.latent_dim, self.hidden, self.output_dim
        p = self.params
        i = z * h
        W1, b1 = p[:i].reshape(z, h), p[i : i + h]
        i += h
        W2 = p[i : i + h * o].reshape(h, o)
        return W1, b1, W2, p[i + h * o :]


def init_generator(latent_dim: int, hidden: int, output_dim: int, rng: np.random.Generator, stream_id: int = 0):
    a1 = np.sqrt(6.0 / (latent_dim + hidden))
    a2 = np.sqrt(6.0 / (hidden + output_dim))
    params = np.concatenate(
        [
            rng.uniform(-a1, a1, latent_dim * hidden),
            np.zeros(hidden),
            rng.uniform(-a2, a2, hidden * output_dim),
            np.zeros(output_dim),
        ]
    )
    return GeneratorState(params, latent_dim, hidden, output_dim, stream_id)


def _gen_forward(gen: GeneratorState, Z):
    W1, b1, W2, b2 = gen._split()
    H = np.tanh(Z @ W1 + b1)
    X = 1.0 / (1.0 + np.exp(-(H @ W2 + b2)))
    return X, H


def generate(gen: GeneratorState, n: int, rng: np.random.Generator) -> np.ndarray:
    return _gen_forward(gen, rng.standard_normal((n, gen.latent_dim)))[0]


def _generator_step(gen, spec, global_params, target, batch, lr, rng):
    Z = rng.standard_normal((batch, gen.latent_dim))
    X, H = _gen_forward(gen, Z)
    dX = input_gradient(spec, global_params, (X, np.full(batch, target)))
    _, _, W2, _ = gen._split()
    dA = dX * X * (1.0 - X)
    dH = (dA @ W2.T) * (1.0 - H * H)
    grad = np.concatenate([(Z.T @ dH).ravel(), dH.sum(axis=0), (H.T @ dA).ravel(), dA.sum(axis=0)])
    return replace(gen, params=gen.params - lr * grad, steps_taken=gen.steps_taken + 1)


def decoy_label(shard: Dataset) -> int:
    """Most populous label in ``shard``; lowest label on ties."""
    if len(shard) == 0:
        raise ValueError("attacker shard is empty")
    return int(np.argmax(np.bincount(shard.y, minlength=shard.num_classes)))


def gan_infer_step(
    global_params,
    spec: ModelSpec,
    gen: GeneratorState,
    own_shard: Dataset,
    cfg: AttackConfig,
    train_cfg: TrainConfig,
    latent_rng: np.random.Generator,
    train_rng: np.random.Generator,
) -> tuple:
    """One round of the inference attack.

    Returns ``(malicious_delta, generated, new_generator)`` where
    ``generated`` holds the poison batch labelled with the target label.
    Only the attacker's own shard and the global parameters are consulted.
    """
    if cfg.target_label >= spec.num_classes:
        raise ValueError("target_label out of range for the model")
    if cfg.target_label in own_shard.labels_present():
        raise ValueError(f"attacker already owns target label {cfg.target_label}")
    if gen.output_dim != spec.input_dim:
        raise ValueError("generator output does not match model input")
    global_params = np.asarray(global_params, dtype=np.float64)
    for _ in range(cfg.gen_steps):
        gen = _generator_step(gen, spec, global_params, cfg.target_label, cfg.gen_batch, cfg.gen_lr, latent_rng)
    fakes = generate(gen, cfg.poison_count, latent_rng)
    decoy = decoy_label(own_shard)
    poisoned = own_shard.concat(Dataset(fakes, np.full(cfg.poison_count, decoy), own_shard.num_classes, own_shard.shape))
    delta = local_train(spec, global_params, poisoned, train_cfg, train_rng)
    generated = Dataset(fakes, np.full(cfg.poison_count, cfg.target_label), own_shard.num_classes, own_shard.shape)
    return delta, generated, gen


def adaptive_project(w_mal, w_global, tau: float) -> np.ndarray:
    """Clamp ``w_mal`` into the l-infinity ball of radius ``tau`` around ``w_global``.

    The bound holds exactly in floating point: ``abs(out - w_global) <= tau``
    for every coordinate.  Points already inside are returned unchanged.
    """
    w_mal = as_param_vector(w_mal, "w_mal")
    w_global = as_param_vector(w_global, "w_global")
    check_same_dim(w_mal, w_global)
    if not tau > 0:
        raise ValueError("tau must be > 0")
    inside = np.abs(w_mal - w_global) <= tau
    out = np.where(inside, w_mal, np.clip(w_mal, w_global - tau, w_global + tau))
    # w +- tau can round outward; step such coordinates towards w_global
    bad = np.abs(out - w_global) > tau
    while bad.any():
        out[bad] = np.nextafter(out[bad], w_global[bad])
        bad = np.abs(out - w_global) > tau
    return out


def adaptive_gan_infer_step(
    global_params,
    spec: ModelSpec,
    gen: GeneratorState,
    own_shard: Dataset,
    cfg: AttackConfig,
    train_cfg: TrainConfig,
    latent_rng: np.random.Generator,
    train_rng: np.random.Generator,
) -> tuple:
    delta, generated, gen = gan_infer_step(global_params, spec, gen, own_shard, cfg, train_cfg, latent_rng, train_rng)
    w_global = np.asarray(global_params, dtype=np.float64)
    projected = adaptive_project(w_global + delta, w_global, cfg.tau)
    return projected - w_global, generated, gen

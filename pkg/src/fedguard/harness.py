"""Federated simulation: data partitioning, rounds, and per-round records."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng as rng_mod
from .aggregation import SELECTING_RULES, AggregationOutcome, ClientUpdate, RuleConfig, aggregate
from .attacks import (
    AttackConfig,
    GeneratorState,
    adaptive_gan_infer_step,
    craft_scale,
    craft_sign_flip,
    gan_infer_step,
    init_generator,
)
from .datasets import Dataset, load_digits_task, load_idx, make_centers, synth_blobs, train_test_split
from .metrics import mean_psnr, mean_ssim
from .models import ModelSpec, TrainConfig, evaluate, init_params, local_train
from .postprocess import apply_postprocess
from .vecmath import l2_norm, linf_norm

__all__ = [
    "DatasetConfig",
    "PartitionConfig",
    "ExperimentConfig",
    "RoundRecord",
    "SimulationState",
    "ExperimentResult",
    "partition_indices",
    "partition",
    "build_root_indices",
    "build_root_dataset",
    "reference_image",
    "load_data",
    "setup",
    "run_round",
    "run_experiment",
    "worker_count",
]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    """Where training and test data come from.

    ``synthetic``: Gaussian blobs; ``digits``: scikit-learn's 8x8 digits
    restricted to ``classes``; ``idx``: IDX files (``per_class`` caps the
    number of samples kept per class when set).
    """

    source: str = "synthetic"
    num_classes: int = 10
    per_class: Optional[int] = 100
    test_per_class: int = 50
    dim: int = 20
    spread: float = 0.1
    shape: Optional[tuple] = None
    classes: tuple = (0, 3)
    test_fraction: float = 0.25
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "digits", "idx"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.source == "idx" and not all(
            (self.train_images, self.train_labels, self.test_images, self.test_labels)
        ):
            raise ValueError("idx source needs train_images, train_labels, test_images and test_labels")
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(self.shape))


@dataclass(frozen=True)
class PartitionConfig:
    mode: str = "label_to_k"
    k: int = 5
    count: int = 3

    def __post_init__(self):
        if self.mode not in ("label_to_k", "labels_per_client"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.k < 1 or self.count < 1:
            raise ValueError("partition k and count must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    rule: RuleConfig
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    n_clients: int = 10
    malicious: Optional[tuple] = None  # None means {n_clients - 1}
    model: str = "logistic"
    hidden: int = 32
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    rounds: int = 300
    eval_every: int = 10
    root_size: int = 0
    export_images: int = 4
    # None defers to FEDGUARD_THREADS
    threads: Optional[int] = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds >= 1 required")
        if self.n_clients < 1:
            raise ValueError("n_clients >= 1 required")
        if self.eval_every < 1:
            raise ValueError("eval_every >= 1 required")
        mal = (self.n_clients - 1,) if self.malicious is None else tuple(sorted(set(int(m) for m in self.malicious)))
        if any(not 0 <= m < self.n_clients for m in mal):
            raise ValueError("malicious ids must lie in [0, n_clients)")
        object.__setattr__(self, "malicious", mal)
        if self.rule.name == "fltrust" and self.root_size < 1:
            raise ValueError("fltrust needs root_size >= 1")
        if self.root_size < 0:
            raise ValueError("root_size must be >= 0")
        self.rule.check_clients(self.n_clients)


@dataclass
class RoundRecord:
    round: int
    rule: str
    accepted: list
    indicator: int
    selects: bool
    attack_active: bool
    distances: Optional[list] = None
    anchor_norm: Optional[float] = None
    delta_norms: Optional[list] = None
    accuracy: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    malicious_linf: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"schema": SCHEMA_VERSION}
        d.update(self.__dict__)
        return d


# -- partitioning -------------------------------------------------------------


def _split_equal(idx: np.ndarray, owners: list) -> dict:
    """Split ``idx`` as evenly as possible; the remainder goes to the lowest ids."""
    owners = sorted(owners)
    base, rem = divmod(idx.shape[0], len(owners))
    out, pos = {}, 0
    for j, c in enumerate(owners):
        size = base + (1 if j < rem else 0)
        out[c] = idx[pos : pos + size]
        pos += size
    return out


def partition_indices(
    labels: np.ndarray,
    num_classes: int,
    n_clients: int,
    rng: np.random.Generator,
    mode: str = "label_to_k",
    k: int = 5,
    count: int = 3,
    exclude: Optional[dict] = None,
) -> list:
    """Non-iid assignment of sample indices to clients.

    ``label_to_k`` gives every label to ``k`` distinct clients;
    ``labels_per_client`` gives every client ``count`` labels.  Owners are
    drawn least-loaded first with seeded tie-breaks, so every client gets at
    least one label whenever the totals allow it.  ``exclude`` maps a client
    id to labels it must not receive.  Each label's samples are split equally
    among its owners.
    """
    labels = np.asarray(labels)
    exclude = {int(c): set(int(l) for l in ls) for c, ls in (exclude or {}).items()}
    present = [c for c in range(num_classes) if np.any(labels == c)]
    owners = {c: [] for c in present}
    if mode == "label_to_k":
        if not 1 <= k <= n_clients:
            raise ValueError(f"k must lie in [1, n_clients] (k={k})")
        load = np.zeros(n_clients, dtype=int)

        def eligible(c):
            return [i for i in range(n_clients) if c not in exclude.get(i, ())]

        # labels with fewer eligible owners pick first
        order = sorted(present, key=lambda c: (len(eligible(c)), c))
        for c in order:
            cand = eligible(c)
            if len(cand) < k:
                raise ValueError(f"label {c} has only {len(cand)} eligible clients, needs {k}")
            tie = rng.permutation(n_clients)
            cand.sort(key=lambda i: (load[i], tie[i]))
            chosen = cand[:k]
            owners[c] = chosen
            load[chosen] += 1
    elif mode == "labels_per_client":
        if not 1 <= count <= len(present):
            raise ValueError(f"count must lie in [1, {len(present)}] (count={count})")
        usage = {c: 0 for c in present}
        for i in range(n_clients):
            cand = [c for c in present if c not in exclude.get(i, ())]
            if len(cand) < count:
                raise ValueError(f"client {i} has only {len(cand)} eligible labels, needs {count}")
            tie = rng.permutation(num_classes)
            cand.sort(key=lambda c: (usage[c], tie[c]))
            for c in cand[:count]:
                owners[c].append(i)
                usage[c] += 1
        orphan = [c for c in present if not owners[c]]
        if orphan:
            raise ValueError(f"labels {orphan} have no owner; increase count or n_clients")
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    shards = [[] for _ in range(n_clients)]
    for c in present:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.shape[0])]
        for client, part in _split_equal(idx, owners[c]).items():
            shards[client].append(part)
    out = []
    for i, parts in enumerate(shards):
        merged = np.sort(np.concatenate(parts)) if parts else np.array([], dtype=np.int64)
        if merged.shape[0] == 0:
            raise ValueError(f"client {i} received no samples")
        out.append(merged)
    return out


def partition(dataset: Dataset, mode: str, n_clients: int, rng: np.random.Generator, **kwargs) -> list:
    idx = partition_indices(dataset.y, dataset.num_classes, n_clients, rng, mode, **kwargs)
    return [dataset.subset(i) for i in idx]


def build_root_indices(dataset: Dataset, size: int, rng: np.random.Generator) -> np.ndarray:
    """Class-stratified sample: ``size // C`` per class, remainder to the lowest labels."""
    if size < 1:
        raise ValueError("root dataset size must be >= 1")
    if size > len(dataset):
        raise ValueError("root dataset larger than the training set")
    base, rem = divmod(size, dataset.num_classes)
    picked = []
    for c in range(dataset.num_classes):
        want = base + (1 if c < rem else 0)
        idx = np.flatnonzero(dataset.y == c)
        if want > idx.shape[0]:
            raise ValueError(f"class {c} has only {idx.shape[0]} samples, root needs {want}")
        picked.append(rng.choice(idx, size=want, replace=False))
    return np.sort(np.concatenate(picked))


def build_root_dataset(dataset: Dataset, size: int, rng: np.random.Generator) -> Dataset:
    return dataset.subset(build_root_indices(dataset, size, rng))


def reference_image(shards: list, benign_ids, target_label: int) -> np.ndarray:
    """Mean of the benign clients' training samples carrying ``target_label``."""
    rows = [s.X[s.y == target_label] for i, s in enumerate(shards) if i in set(benign_ids)]
    rows = [r for r in rows if r.shape[0]]
    if not rows:
        raise ValueError(f"no benign client holds label {target_label}")
    return np.vstack(rows).mean(axis=0)


# -- simulation ---------------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> tuple:
    d = cfg.dataset
    if d.source == "synthetic":
        rng = rng_mod.substream(cfg.seed, rng_mod.DATASET)
        centers = make_centers(d.num_classes, d.dim, rng)
        train = synth_blobs(d.num_classes, d.per_class or 0, d.dim, d.spread, rng, centers, d.shape)
        test = synth_blobs(d.num_classes, d.test_per_class, d.dim, d.spread, rng, centers, d.shape)
        return train, test
    if d.source == "digits":
        full = load_digits_task(d.classes)
        return train_test_split(full, d.test_fraction, rng_mod.substream(cfg.seed, rng_mod.TEST_SPLIT))
    train = load_idx(d.train_images, d.train_labels, d.num_classes)
    test = load_idx(d.test_images, d.test_labels, d.num_classes)
    if d.per_class:
        keep = np.concatenate([np.flatnonzero(train.y == c)[: d.per_class] for c in range(train.num_classes)])
        train = train.subset(np.sort(keep))
    return train, test


def worker_count(cfg: ExperimentConfig) -> int:
    if cfg.threads is not None:
        return max(1, int(cfg.threads))
    env = os.environ.get("FEDGUARD_THREADS")
    return max(1, int(env)) if env else 1


@dataclass
class SimulationState:
    cfg: ExperimentConfig
    spec: ModelSpec
    train: Dataset
    test: Dataset
    shards: list
    shard_indices: list
    root: Optional[Dataset]
    root_indices: Optional[np.ndarray]
    params: np.ndarray
    generator: Optional[GeneratorState] = None
    reference: Optional[np.ndarray] = None

    @property
    def benign_ids(self) -> list:
        mal = set(self.cfg.malicious)
        return [i for i in range(self.cfg.n_clients) if i not in mal]


def setup(cfg: ExperimentConfig, data: Optional[tuple] = None) -> SimulationState:
    train, test = data if data is not None else load_data(cfg)
    spec = ModelSpec(cfg.model, train.n_features, train.num_classes, cfg.hidden)
    root = root_idx = None
    pool_idx = np.arange(len(train))
    if cfg.root_size:
        root_idx = build_root_indices(train, cfg.root_size, rng_mod.substream(cfg.seed, rng_mod.ROOT_SAMPLE))
        root = train.subset(root_idx)
        pool_idx = np.setdiff1d(pool_idx, root_idx)
    pool = train.subset(pool_idx)
    exclude = None
    atk = cfg.attack
    if atk.is_gan:
        if atk.target_label >= train.num_classes:
            raise ValueError("target_label out of range for the dataset")
        exclude = {m: {atk.target_label} for m in cfg.malicious}
    local = partition_indices(
        pool.y,
        pool.num_classes,
        cfg.n_clients,
        rng_mod.substream(cfg.seed, rng_mod.PARTITION),
        cfg.partition.mode,
        k=cfg.partition.k,
        count=cfg.partition.count,
        exclude=exclude,
    )
    # indices into the full training set
    shard_idx = [pool_idx[i] for i in local]
    shards = [train.subset(i) for i in shard_idx]
    state = SimulationState(
        cfg=cfg,
        spec=spec,
        train=train,
        test=test,
        shards=shards,
        shard_indices=shard_idx,
        root=root,
        root_indices=root_idx,
        params=init_params(spec, rng_mod.substream(cfg.seed, rng_mod.MODEL_INIT)),
    )
    if atk.is_gan:
        lead = cfg.malicious[0]
        state.generator = init_generator(
            atk.latent_dim, atk.gen_hidden, spec.input_dim, rng_mod.substream(cfg.seed, rng_mod.GENERATOR_INIT, lead), lead
        )
        state.reference = reference_image(shards, state.benign_ids, atk.target_label)
    return state


def _client_delta(state: SimulationState, client: int, t: int, generator: Optional[GeneratorState], secondary: bool):
    """Return ``(delta, generated images or None, new generator or None)``."""
    cfg = state.cfg
    atk = cfg.attack
    shard = state.shards[client]
    train_rng = rng_mod.substream(cfg.seed, rng_mod.LOCAL_SHUFFLE, client, t)
    if client in cfg.malicious and atk.active(t):
        if atk.kind == "sign_flip":
            return craft_sign_flip(local_train(state.spec, state.params, shard, cfg.train, train_rng), atk.scale), None, None
        if atk.kind == "scale":
            return craft_scale(local_train(state.spec, state.params, shard, cfg.train, train_rng), atk.scale), None, None
        step = adaptive_gan_infer_step if atk.kind == "adaptive_gan_infer" else gan_infer_step
        run_cfg = atk
        if secondary:
            run_cfg = replace(atk, gen_steps=0)
        latent_rng = rng_mod.substream(cfg.seed, rng_mod.GENERATOR_LATENT, client, t)
        delta, generated, gen = step(state.params, state.spec, generator, shard, run_cfg, cfg.train, latent_rng, train_rng)
        return delta, generated, gen
    return local_train(state.spec, state.params, shard, cfg.train, train_rng), None, None


def _indicator(outcome: AggregationOutcome, malicious) -> int:
    return int(bool(set(outcome.accepted) & set(malicious)))


def run_round(state: SimulationState, t: int, pool: Optional[ThreadPoolExecutor] = None) -> tuple:
    """Advance the federation by one round.

    Returns ``(new_params, record, generated)``; ``state.params`` and the
    attacker's generator are updated in place.  ``generated`` is the lead
    attacker's image batch, or None.
    """
    cfg = state.cfg
    n = cfg.n_clients
    atk = cfg.attack
    active = atk.active(t)
    lead = cfg.malicious[0] if cfg.malicious else None
    gan_round = active and atk.is_gan

    def work(c):
        try:
            return _client_delta(state, c, t, state.generator, secondary=False)
        except Exception as exc:
            raise RuntimeError(f"round {t}, client {c}: {exc}") from exc

    first = [c for c in range(n) if not (gan_round and c in cfg.malicious and c != lead)]
    results = dict(zip(first, pool.map(work, first) if pool is not None else map(work, first)))
    generated = new_gen = None
    if gan_round:
        _, generated, new_gen = results[lead]
        for c in cfg.malicious[1:]:
            results[c] = _client_delta(state, c, t, new_gen, secondary=True)
        state.generator = new_gen
    raw = {c: results[c][0] for c in range(n)}
    deltas = {c: apply_postprocess(raw[c], cfg.rule.postprocess, cfg.seed, c, t) for c in range(n)}
    updates = [ClientUpdate(c, t, deltas[c]) for c in range(n)]
    root_update = None
    if cfg.rule.name == "fltrust":
        root_rng = rng_mod.substream(cfg.seed, rng_mod.LOCAL_SHUFFLE, n, t)
        root_update = local_train(state.spec, state.params, state.root, cfg.train, root_rng)
    try:
        outcome = aggregate(updates, cfg.rule, root_update)
    except Exception as exc:
        raise RuntimeError(f"round {t}, aggregation: {exc}") from exc
    new_params = state.params + outcome.aggregate
    state.params = new_params

    rec = RoundRecord(
        round=t,
        rule=cfg.rule.name,
        accepted=sorted(int(i) for i in outcome.accepted),
        indicator=_indicator(outcome, cfg.malicious),
        selects=cfg.rule.name in SELECTING_RULES,
        attack_active=active,
        distances=None if outcome.distances is None else [outcome.distances[c] for c in range(n)],
        anchor_norm=None if outcome.anchor is None else l2_norm(outcome.anchor),
        delta_norms=[l2_norm(deltas[c]) for c in range(n)],
    )
    if active and lead is not None:
        rec.malicious_linf = max(linf_norm(deltas[m]) for m in cfg.malicious)
    if (t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1:
        rec.accuracy = evaluate(state.spec, new_params, state.test)
    if generated is not None and state.train.shape is not None:
        rec.psnr = mean_psnr(generated.X, state.reference, state.train.shape)
        rec.ssim = mean_ssim(generated.X, state.reference, state.train.shape)
    return new_params, rec, generated


@dataclass
class ExperimentResult:
    records: list
    params: np.ndarray
    state: SimulationState
    # round -> generated image batch, kept for evaluation rounds and the last round
    images: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, data: Optional[tuple] = None) -> ExperimentResult:
    state = setup(cfg, data)
    records, images = [], {}
    workers = worker_count(cfg)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(cfg.rounds):
            _, rec, generated = run_round(state, t, pool)
            records.append(rec)
            if generated is not None and (rec.accuracy is not None):
                images[t] = generated.X[: cfg.export_images]
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentResult(records, state.params, state, images)

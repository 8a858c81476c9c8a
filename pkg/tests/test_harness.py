import numpy as np
import pytest

from fedguard.aggregation import PostStage, RuleConfig
from fedguard.attacks import AttackConfig
from fedguard.datasets import Dataset
from fedguard.harness import (
    DatasetConfig,
    ExperimentConfig,
    PartitionConfig,
    build_root_dataset,
    build_root_indices,
    partition,
    partition_indices,
    reference_image,
    run_experiment,
    run_round,
    setup,
)
from fedguard import rng as rng_mod
from fedguard.models import TrainConfig, local_train


def _labels(per_class=37, classes=10):
    return np.repeat(np.arange(classes), per_class)


class TestPartition:
    def test_label_to_k(self, rng):
        y = _labels()
        shards = partition_indices(y, 10, 10, rng, "label_to_k", k=5)
        for c in range(10):
            assert sum(np.any(y[s] == c) for s in shards) == 5
        allidx = np.concatenate(shards)
        assert np.array_equal(np.sort(allidx), np.arange(y.shape[0]))

    def test_iid_limit(self, rng):
        y = _labels()
        for s in partition_indices(y, 10, 10, rng, "label_to_k", k=10):
            assert set(y[s]) == set(range(10))

    def test_equal_split(self, rng):
        shards = partition_indices(np.zeros(1000, int), 1, 5, rng, "label_to_k", k=5)
        assert [len(s) for s in shards] == [200] * 5
        shards = partition_indices(np.zeros(1003, int), 1, 5, rng, "label_to_k", k=5)
        assert sorted(len(s) for s in shards) == [200, 200, 201, 201, 201]

    def test_labels_per_client(self, rng):
        y = _labels()
        shards = partition_indices(y, 10, 10, rng, "labels_per_client", count=3)
        assert all(len(set(y[s])) == 3 for s in shards)
        assert np.array_equal(np.sort(np.concatenate(shards)), np.arange(y.shape[0]))

    def test_errors(self, rng):
        with pytest.raises(ValueError, match="no samples"):
            partition_indices(_labels(classes=2), 2, 10, rng, "label_to_k", k=2)
        with pytest.raises(ValueError):
            partition_indices(_labels(), 10, 10, rng, "label_to_k", k=11)
        with pytest.raises(ValueError):
            partition_indices(_labels(), 10, 10, rng, "round_robin")

    def test_exclusion_respected(self, rng):
        y = _labels()
        shards = partition_indices(y, 10, 10, rng, "label_to_k", k=5, exclude={9: {3}})
        assert 3 not in set(y[shards[9]])

    def test_seeded(self):
        y = _labels()
        a = partition_indices(y, 10, 10, np.random.default_rng(4), k=5)
        b = partition_indices(y, 10, 10, np.random.default_rng(4), k=5)
        assert all(np.array_equal(p, q) for p, q in zip(a, b))

    def test_dataset_wrapper(self, rng):
        d = Dataset(np.random.default_rng(0).uniform(size=(40, 2)), np.repeat([0, 1], 20), 2)
        shards = partition(d, "label_to_k", 4, rng, k=2)
        assert sum(len(s) for s in shards) == 40


def test_root_dataset(rng):
    d = Dataset(np.random.default_rng(0).uniform(size=(30, 2)), np.repeat([0, 1, 2], 10), 3)
    with pytest.raises(ValueError):
        build_root_dataset(d, 0, rng)
    assert sorted(build_root_dataset(d, 3, rng).y) == [0, 1, 2]
    assert sorted(np.bincount(build_root_dataset(d, 8, rng).y)) == [2, 3, 3]
    a = build_root_indices(d, 5, np.random.default_rng(1))
    b = build_root_indices(d, 5, np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_shards_and_root_cover_training_set():
    cfg = ExperimentConfig(RuleConfig("fltrust"), rounds=1, root_size=50)
    st = setup(cfg)
    parts = np.concatenate(st.shard_indices + [st.root_indices])
    assert np.array_equal(np.sort(parts), np.arange(len(st.train)))


def test_reference_image():
    s0 = Dataset([[0.2, 0.4], [1.0, 1.0]], [1, 0], 2)
    s1 = Dataset([[0.6, 0.0]], [1], 2)
    s2 = Dataset([[0.0, 0.0]], [1], 2)
    np.testing.assert_allclose(reference_image([s0, s1, s2], [0, 1], 1), [0.4, 0.2])
    with pytest.raises(ValueError):
        reference_image([s0], [0], 5)


def test_config_validation():
    with pytest.raises(ValueError, match="rounds"):
        ExperimentConfig(RuleConfig("fedavg"), rounds=0)
    with pytest.raises(ValueError):
        ExperimentConfig(RuleConfig("fedavg"), malicious=(10,))
    with pytest.raises(ValueError):
        ExperimentConfig(RuleConfig("fltrust"))
    assert ExperimentConfig(RuleConfig("fedavg")).malicious == (9,)


def test_two_identical_clients_fedavg():
    d = Dataset(np.random.default_rng(0).uniform(size=(10, 3)), np.repeat([0, 1], 5), 2)
    cfg = ExperimentConfig(RuleConfig("fedavg"), n_clients=2, partition=PartitionConfig(k=2), rounds=1, attack=AttackConfig())
    st = setup(cfg, (d, d))
    st.shards = [d, d]
    start = st.params.copy()
    new, rec, _ = run_round(st, 0)
    d0 = local_train(st.spec, start, d, cfg.train, rng_mod.substream(0, rng_mod.LOCAL_SHUFFLE, 0, 0))
    d1 = local_train(st.spec, start, d, cfg.train, rng_mod.substream(0, rng_mod.LOCAL_SHUFFLE, 1, 0))
    # the two clients shuffle with different substreams; FedAvg returns their mean
    np.testing.assert_allclose(new - start, (d0 + d1) / 2, rtol=1e-12, atol=1e-15)
    assert rec.accepted == [0, 1] and not rec.selects


def test_identical_clients_same_stream_give_common_delta():
    d = Dataset(np.full((4, 2), 0.5), [0, 1, 0, 1], 2)
    cfg = ExperimentConfig(RuleConfig("fedavg"), n_clients=2, partition=PartitionConfig(k=2), rounds=1,
                           train=TrainConfig(batch_size=8))
    st = setup(cfg, (d, d))
    st.shards = [d, d]
    start = st.params.copy()
    new, _, _ = run_round(st, 0)
    # full-batch step on identical rows: order does not matter
    d0 = local_train(st.spec, start, d, cfg.train, np.random.default_rng(0))
    np.testing.assert_allclose(new - start, d0, rtol=1e-12, atol=1e-16)


def _sign_flip_cfg(rule="inferguard", start=0, rounds=30, **kw):
    return ExperimentConfig(
        RuleConfig(rule, lam=2.0),
        attack=AttackConfig("sign_flip", start_round=start, scale=10.0),
        rounds=rounds,
        **kw,
    )


def test_indicator_matches_logged_distances():
    res = run_experiment(_sign_flip_cfg())
    for rec in res.records:
        bound = 2.0 * rec.anchor_norm
        within = [i for i, d in enumerate(rec.distances) if d <= bound]
        if rec.distances[9] > bound:
            assert rec.indicator == 0
        assert rec.indicator == int(9 in rec.accepted)
        if within:
            assert rec.accepted == within


@pytest.mark.parametrize("rule", ["fedavg", "median", "trim", "multikrum", "bulyan", "afa", "inferguard"])
def test_indicator_is_set_intersection(rule):
    res = run_experiment(_sign_flip_cfg(rule, start=3, rounds=8))
    for rec in res.records:
        assert rec.indicator == int(bool(set(rec.accepted) & {9}))
        if not rec.selects and rec.attack_active:
            assert rec.indicator == 1


def test_malicious_delta_before_start_is_benign():
    quiet = run_experiment(ExperimentConfig(RuleConfig("inferguard"), attack=AttackConfig(), rounds=10))
    attacked = run_experiment(_sign_flip_cfg(start=10, rounds=10))
    for a, b in zip(quiet.records, attacked.records):
        assert a.delta_norms == b.delta_norms and a.distances == b.distances
    assert quiet.params.tobytes() == attacked.params.tobytes()


def test_thread_count_does_not_change_records():
    a = run_experiment(_sign_flip_cfg(rounds=12, threads=1))
    b = run_experiment(_sign_flip_cfg(rounds=12, threads=4))
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]
    assert a.params.tobytes() == b.params.tobytes()


def test_no_attack_baseline_accuracy():
    res = run_experiment(ExperimentConfig(RuleConfig("fedavg"), seed=0, attack=AttackConfig(), rounds=50))
    assert res.records[-1].accuracy >= 0.95
    assert [r.round for r in res.records if r.accuracy is not None] == [9, 19, 29, 39, 49]


def test_no_attack_metrics_before_start():
    res = run_experiment(_sign_flip_cfg(start=50, rounds=55))
    for rec in res.records:
        assert rec.attack_active == (rec.round >= 50)
        if rec.round < 50:
            assert rec.malicious_linf is None and rec.psnr is None and rec.ssim is None
        else:
            assert rec.malicious_linf is not None


def test_fltrust_and_postprocess_runs():
    res = run_experiment(_sign_flip_cfg("fltrust", rounds=5, root_size=40))
    for rec in res.records:
        assert rec.accepted == [i for i, t in enumerate(rec.distances) if t > 0]
    iid = run_experiment(_sign_flip_cfg("fltrust", rounds=20, root_size=40, partition=PartitionConfig(k=10)))
    assert all(r.indicator == 0 for r in iid.records)
    dp = (PostStage("topk", p=0.5), PostStage("dp", clip=1.0, sigma=0.1))
    cfg = ExperimentConfig(RuleConfig("inferguard", postprocess=dp), attack=AttackConfig(), rounds=3)
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a.params.tobytes() == b.params.tobytes()
    for rec in a.records:
        assert max(rec.delta_norms) <= 1.0 + 1e-12 + 5 * 0.1 * np.sqrt(a.state.spec.n_params)


def test_gan_setup_keeps_target_off_attacker():
    cfg = ExperimentConfig(
        RuleConfig("fedavg"),
        dataset=DatasetConfig(source="digits", classes=(0, 3)),
        attack=AttackConfig("gan_infer", start_round=0, target_label=1),
        rounds=1,
    )
    st = setup(cfg)
    assert 1 not in set(st.shards[9].y)
    assert st.reference.shape == (64,) and st.generator is not None


def test_inferguard_rejects_sign_flip_under_label_skew():
    cfg = ExperimentConfig(
        RuleConfig("inferguard", lam=2.0),
        partition=PartitionConfig("label_to_k", k=5),
        attack=AttackConfig("sign_flip", start_round=50, scale=10.0),
        rounds=150,
    )
    post = [r.indicator for r in run_experiment(cfg).records if r.round >= 50]
    assert post.count(0) / len(post) >= 0.95

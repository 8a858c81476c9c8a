"""scikit-learn classifier that trains through a simulated federation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .aggregation import RuleConfig
from .attacks import AttackConfig
from .datasets import Dataset
from .harness import ExperimentConfig, PartitionConfig, run_experiment
from .models import TrainConfig, logits


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Fit a softmax model with federated rounds under a chosen aggregation rule.

    ``fit`` partitions ``(X, y)`` across ``n_clients`` clients, optionally
    lets the last client attack, and keeps the final global parameters in
    ``coef_`` and the per-round log in ``records_``.  Features must lie in
    [0, 1].

    Examples
    --------
    >>> from sklearn.datasets import make_blobs
    >>> X, y = make_blobs(300, n_features=5, centers=3, random_state=0)
    >>> X = (X - X.min()) / (X.max() - X.min())
    >>> clf = FederatedClassifier(rounds=20, partition_k=10, lr=0.5).fit(X, y)
    >>> clf.score(X, y) > 0.9
    True
    """

    def __init__(
        self,
        rule="inferguard",
        lam=2.0,
        trim_k=1,
        byzantine_f=1,
        krum_m=None,
        model="logistic",
        hidden=32,
        n_clients=10,
        partition="label_to_k",
        partition_k=5,
        labels_per_client=3,
        rounds=50,
        lr=0.05,
        batch_size=32,
        local_epochs=1,
        attack="none",
        attack_start=0,
        attack_scale=10.0,
        root_size=0,
        random_state=0,
    ):
        self.rule = rule
        self.lam = lam
        self.trim_k = trim_k
        self.byzantine_f = byzantine_f
        self.krum_m = krum_m
        self.model = model
        self.hidden = hidden
        self.n_clients = n_clients
        self.partition = partition
        self.partition_k = partition_k
        self.labels_per_client = labels_per_client
        self.rounds = rounds
        self.lr = lr
        self.batch_size = batch_size
        self.local_epochs = local_epochs
        self.attack = attack
        self.attack_start = attack_start
        self.attack_scale = attack_scale
        self.root_size = root_size
        self.random_state = random_state

    def _config(self) -> ExperimentConfig:
        root = self.root_size or (100 if self.rule == "fltrust" else 0)
        return ExperimentConfig(
            rule=RuleConfig(self.rule, lam=self.lam, k=self.trim_k, f=self.byzantine_f, m=self.krum_m),
            seed=self.random_state,
            partition=PartitionConfig(self.partition, k=self.partition_k, count=self.labels_per_client),
            n_clients=self.n_clients,
            model=self.model,
            hidden=self.hidden,
            train=TrainConfig(self.lr, self.batch_size, self.local_epochs),
            attack=AttackConfig(self.attack, start_round=self.attack_start, scale=self.attack_scale),
            rounds=self.rounds,
            eval_every=self.rounds,
            root_size=root,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        data = Dataset(X, np.searchsorted(self.classes_, y), self.classes_.shape[0])
        result = run_experiment(self._config(), data=(data, data))
        self.spec_ = result.state.spec
        self.coef_ = result.params
        self.records_ = [r.to_dict() for r in result.records]
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        return logits(self.spec_, self.coef_, check_array(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

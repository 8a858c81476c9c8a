"""Federated-learning robustness simulator built around median-anchored update filtering."""

__version__ = "0.1.0"

from .aggregation import (
    AFA,
    AggregationOutcome,
    Bulyan,
    ClientUpdate,
    CoordinateMedian,
    FedAvg,
    FLTrust,
    InferGuard,
    MultiKrum,
    RuleConfig,
    TrimmedMean,
    aggregate,
    infer_guard,
)
from .federated import FederatedClassifier
from .models import SoftmaxRegression, TanhMLPClassifier
from .postprocess import GaussianDP, SignCompressor, TopKSparsifier

__all__ = [
    "AFA",
    "AggregationOutcome",
    "Bulyan",
    "ClientUpdate",
    "CoordinateMedian",
    "FedAvg",
    "FLTrust",
    "FederatedClassifier",
    "GaussianDP",
    "InferGuard",
    "MultiKrum",
    "RuleConfig",
    "SignCompressor",
    "SoftmaxRegression",
    "TanhMLPClassifier",
    "TopKSparsifier",
    "TrimmedMean",
    "aggregate",
    "infer_guard",
]

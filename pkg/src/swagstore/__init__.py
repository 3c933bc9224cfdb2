"""Streaming SWAG posteriors over tier-simulated storage backends."""

from .bayes import EvalMetrics, PredictiveResult, SwagBMAClassifier, bma_predict, evaluate, point_predict
from .coalescer import CoalescerConfig, FlushPolicy, WriteCoalescer
from .store import (
    ArrayHandle,
    BackendConfig,
    BackendStats,
    InMemoryBackend,
    Layout,
    MappedFileBackend,
    SimulatedPMemBackend,
    TieredCacheBackend,
    make_backend,
)
from .swag import SwagConfig, SwagPosterior, estimate_size, rank_after_epochs
from .trainer import Dataset, MlpModel, SGDMLPClassifier, TrainConfig, parse_idx, synthetic_dataset

__version__ = "0.1.0"

__all__ = [
    "ArrayHandle",
    "BackendConfig",
    "BackendStats",
    "CoalescerConfig",
    "Dataset",
    "EvalMetrics",
    "FlushPolicy",
    "InMemoryBackend",
    "Layout",
    "MappedFileBackend",
    "MlpModel",
    "PredictiveResult",
    "SGDMLPClassifier",
    "SimulatedPMemBackend",
    "SwagBMAClassifier",
    "SwagConfig",
    "SwagPosterior",
    "TieredCacheBackend",
    "TrainConfig",
    "WriteCoalescer",
    "bma_predict",
    "estimate_size",
    "evaluate",
    "make_backend",
    "parse_idx",
    "point_predict",
    "rank_after_epochs",
    "synthetic_dataset",
]

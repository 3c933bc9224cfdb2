"""Monte-Carlo Bayesian model averaging and calibration metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigurationError, DimensionError
from .swag import SwagPosterior
from .trainer import Dataset, MlpModel, TrainConfig, sgd_epoch

__all__ = [
    "PredictiveResult",
    "EvalMetrics",
    "point_predict",
    "bma_predict",
    "evaluate",
    "expected_calibration_error",
    "SwagBMAClassifier",
]

PROB_FLOOR = 1e-12
DEFAULT_SAMPLES = 30


@dataclass(frozen=True)
class PredictiveResult:
    probs: np.ndarray
    source: str = "point"
    n_samples: int = 1


@dataclass(frozen=True)
class EvalMetrics:
    nll: float
    accuracy: float
    ece: float

    def to_record(self, source, n_samples, seed):
        return {"source": source, "S": n_samples, "nll": self.nll, "accuracy": self.accuracy,
                "ece": self.ece, "seed": seed}


def point_predict(model, inputs):
    return PredictiveResult(model.predict_proba(inputs), "point", 1)


def bma_predict(model, posterior, inputs, n_samples=DEFAULT_SAMPLES, seed=0):
    """Average softmax outputs over ``n_samples`` posterior draws.

    The average is accumulated as a running mean, so identical draws
    reproduce the single-model probabilities bit for bit.
    """
    if int(n_samples) < 1:
        raise ConfigurationError("n_samples must be >= 1")
    if posterior.n_features_in_ != model.n_params:
        raise DimensionError(
            f"posterior over {posterior.n_features_in_} parameters, model has {model.n_params}"
        )
    thetas = posterior.sample_batch(int(n_samples), seed)
    member = model.copy()
    probs = None
    for s, theta in enumerate(thetas, start=1):
        p = member.set_flat(theta).predict_proba(inputs)
        probs = p if probs is None else probs + (p - probs) / s
    return PredictiveResult(probs, "swag_bma", int(n_samples))


def expected_calibration_error(probs, labels, n_bins=15):
    """Binned |accuracy - confidence| gap, weighted by bin occupancy.

    Bins are equal-width on the top-class probability and closed on the
    right: ``(lo, hi]``, with a confidence of exactly 0 in the first bin.
    """
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = np.searchsorted(edges[1:-1], conf, side="left")
    n = len(labels)
    ece = 0.0
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            ece += mask.sum() / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(ece)


def evaluate(pred, labels, n_bins=15):
    probs = pred.probs if isinstance(pred, PredictiveResult) else np.asarray(pred)
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for {probs.shape[0]} predictions")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise DimensionError(f"labels must lie in [0, {probs.shape[1]})")
    p_true = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    nll = float(-np.log(p_true).mean())
    accuracy = float((probs.argmax(axis=1) == labels).mean())
    return EvalMetrics(nll, accuracy, expected_calibration_error(probs, labels, n_bins))


class SwagBMAClassifier(ClassifierMixin, BaseEstimator):
    """MLP trained by SGD with a SWAG posterior collected along the way.

    ``predict_proba`` averages over ``n_samples`` posterior draws; set
    ``n_samples=0`` to predict with the final SGD iterate instead.
    """

    def __init__(self, hidden_layer_sizes=(32, 32), minibatch_size=100, minibatches_per_epoch=600,
                 epochs=2, learning_rate=0.05, burn_in=0, max_columns=20, scale=1.0,
                 n_samples=DEFAULT_SAMPLES, random_state=0, backend=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.minibatch_size = minibatch_size
        self.minibatches_per_epoch = minibatches_per_epoch
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.burn_in = burn_in
        self.max_columns = max_columns
        self.scale = scale
        self.n_samples = n_samples
        self.random_state = random_state
        self.backend = backend

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        data = Dataset(X, encoded.astype(np.int64), len(self.classes_))
        config = TrainConfig(self.minibatch_size, self.minibatches_per_epoch, self.epochs,
                             self.learning_rate, self.random_state)
        self.model_ = MlpModel((X.shape[1], *self.hidden_layer_sizes, len(self.classes_)),
                               seed=self.random_state)
        self.posterior_ = SwagPosterior(burn_in=self.burn_in, max_columns=self.max_columns,
                                        scale=self.scale, backend=self.backend)
        self.posterior_.allocate(self.model_.n_params)
        for epoch in range(config.epochs):
            sgd_epoch(self.model_, data, config, self.posterior_.update, epoch)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "posterior_")
        X = check_array(X, dtype=np.float64)
        if self.n_samples == 0:
            return point_predict(self.model_, X).probs
        return bma_predict(self.model_, self.posterior_, X, self.n_samples, self.random_state).probs

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

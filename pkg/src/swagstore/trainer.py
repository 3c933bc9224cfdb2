"""Desk-scale training that produces the SGD iterate stream.

A small fully connected ReLU network with a softmax output, trained by
plain minibatch SGD on mean cross-entropy. An observer callback receives
the flattened parameters after every minibatch.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigurationError, DimensionError, DivergenceError, IdxFormatError

__all__ = [
    "PRESETS",
    "Dataset",
    "MlpModel",
    "TrainConfig",
    "SGDMLPClassifier",
    "parse_idx",
    "read_idx",
    "load_mnist",
    "synthetic_dataset",
    "softmax",
    "gradient",
    "sgd_epoch",
]

PRESETS = {
    "desk": (784, 32, 32, 10),
    # four dense layers, 2,797,010 parameters
    "large": (784, 1000, 1000, 1000, 10),
}

_IDX_TYPES = {0x08: np.dtype("u1"), 0x0C: np.dtype(">i4")}


# -- IDX -----------------------------------------------------------------


def parse_idx(data):
    """Decode an IDX byte string into an array shaped by its dimension list.

    Supports type codes 0x08 (unsigned byte) and 0x0C (big-endian int32).
    """
    data = bytes(data)
    if len(data) < 4:
        raise IdxFormatError("IDX stream shorter than its 4-byte magic")
    if data[0] != 0 or data[1] != 0:
        raise IdxFormatError(f"bad IDX magic {data[:4].hex()}")
    type_code, ndim = data[2], data[3]
    if type_code not in _IDX_TYPES:
        raise IdxFormatError(f"unsupported IDX type code 0x{type_code:02x}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxFormatError(f"IDX header truncated: need {header_len} bytes, have {len(data)}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dtype = _IDX_TYPES[type_code]
    expected = math.prod(dims) * dtype.itemsize
    payload = len(data) - header_len
    if payload < expected:
        raise IdxFormatError(f"IDX payload truncated: {payload} of {expected} bytes")
    if payload > expected:
        raise IdxFormatError(f"{payload - expected} trailing bytes after IDX payload")
    arr = np.frombuffer(data, dtype=dtype, count=math.prod(dims), offset=header_len).reshape(dims)
    return arr.astype(np.int32) if type_code == 0x0C else arr


def read_idx(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_idx(fh.read())


def _find(directory, stem):
    for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        path = directory / candidate
        if path.exists():
            return path
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory, split="train"):
    """Load MNIST from the four standard IDX files in ``directory``."""
    prefix = {"train": "train", "test": "t10k"}[split]
    directory = Path(directory)
    images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"))
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return _frozen(X, labels.astype(np.int64), 10)


# -- data ------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        X, y = self.inputs, self.labels
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
            raise DimensionError(f"inputs {X.shape} and labels {y.shape} do not form a dataset")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise DimensionError(f"labels must lie in [0, {self.n_classes})")
        if X.min() < 0 or X.max() > 1:
            raise DimensionError("inputs must lie in [0, 1]")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self):
        return self.inputs.shape[1]


def synthetic_dataset(seed=0, n_samples=6000, n_features=784, n_classes=10, spread=0.1):
    """Gaussian class blobs clipped to [0, 1].

    Class centres sit at ``0.5 + 0.35 * v_c / max|v_c|`` for orthonormal
    directions ``v_c`` (random unit directions once classes outnumber
    features), so every centre lies inside [0.15, 0.85] and any two are at
    least ``0.35 * sqrt(2)`` apart.
    """
    if min(n_samples, n_features, n_classes) < 1:
        raise ConfigurationError("n_samples, n_features and n_classes must be >= 1")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n_features, n_classes))
    if n_classes <= n_features:
        directions, _ = np.linalg.qr(raw)
    else:
        directions = raw / np.linalg.norm(raw, axis=0)
    directions = directions.T / np.abs(directions.T).max(axis=1, keepdims=True)
    centres = 0.5 + 0.35 * directions
    labels = rng.integers(0, n_classes, size=n_samples)
    X = centres[labels] + spread * rng.standard_normal((n_samples, n_features))
    return _frozen(np.clip(X, 0.0, 1.0), labels.astype(np.int64), n_classes)


def _frozen(X, y, n_classes):
    X.flags.writeable = False
    y.flags.writeable = False
    return Dataset(X, y, n_classes)


# -- model -----------------------------------------------------------------


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class MlpModel:
    """Dense ReLU network whose parameters live in one flat float64 vector.

    ``weights[i]`` (fan_in x fan_out) and ``biases[i]`` are views into the
    flat vector, laid out layer by layer as W (row-major) then b.
    """

    def __init__(self, layer_sizes=PRESETS["desk"], seed=0, params=None):
        if isinstance(layer_sizes, str):
            layer_sizes = PRESETS[layer_sizes]
        self.layer_sizes = tuple(int(n) for n in layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ConfigurationError(f"bad layer sizes {layer_sizes!r}")
        self.n_params = sum(a * b + b for a, b in zip(self.layer_sizes, self.layer_sizes[1:]))
        self._flat = np.empty(self.n_params)
        self.weights, self.biases = [], []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:]):
            W = self._flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self._flat[offset:offset + fan_out]
            offset += fan_out
            self.weights.append(W)
            self.biases.append(b)
        if params is not None:
            self.set_flat(params)
        else:
            self._init(seed)

    def _init(self, seed):
        # He-uniform weights; biases like torch.nn.Linear
        rng = np.random.default_rng(seed)
        for W, b in zip(self.weights, self.biases):
            fan_in = W.shape[0]
            W[...] = rng.uniform(-math.sqrt(6.0 / fan_in), math.sqrt(6.0 / fan_in), W.shape)
            b[...] = rng.uniform(-1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in), b.shape)

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_classes(self):
        return self.layer_sizes[-1]

    def flatten(self):
        return self._flat.copy()

    def set_flat(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got shape {params.shape}")
        self._flat[...] = params
        return self

    def with_params(self, params):
        return MlpModel(self.layer_sizes, params=params)

    def copy(self):
        return self.with_params(self._flat)

    def _check_inputs(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise DimensionError(f"expected inputs of shape (n, {self.n_inputs}), got {X.shape}")
        return X

    def logits(self, X):
        h = self._check_inputs(X)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def predict_proba(self, X):
        return softmax(self.logits(X))

    def loss_and_grad(self, X, y):
        """Mean cross-entropy and its gradient as a flat vector."""
        X = self._check_inputs(X)
        y = np.asarray(y)
        n = X.shape[0]
        if n == 0 or y.shape != (n,):
            raise DimensionError(f"batch of {n} inputs with labels of shape {y.shape}")
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        logits = acts[-1]
        if not np.all(np.isfinite(logits)):
            raise DivergenceError("non-finite activations")
        logp = _log_softmax(logits)
        loss = -logp[np.arange(n), y].mean()

        grad = np.empty(self.n_params)
        gW = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0
        delta /= n
        for i in range(last, -1, -1):
            gW[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        offset = 0
        for w, b in zip(gW, gb):
            grad[offset:offset + w.size] = w.ravel()
            offset += w.size
            grad[offset:offset + b.size] = b
            offset += b.size
        return loss, grad

    def __eq__(self, other):
        return (isinstance(other, MlpModel) and self.layer_sizes == other.layer_sizes
                and np.array_equal(self._flat, other._flat))

    def __repr__(self):
        return f"MlpModel({'-'.join(map(str, self.layer_sizes))}, n_params={self.n_params})"


def gradient(model, X, y):
    """Exact gradient of mean cross-entropy over the batch, flattened."""
    return model.loss_and_grad(X, y)[1]


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    minibatch_size: int = 100
    minibatches_per_epoch: int = 600
    epochs: int = 1
    learning_rate: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("minibatch_size", "minibatches_per_epoch", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be >= 0")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown train keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


def _batch_order(n, n_needed, rng):
    order = [rng.permutation(n) for _ in range(-(-n_needed // n))]
    return np.concatenate(order)[:n_needed]


def sgd_epoch(model, dataset, config, observer=None, epoch=0):
    """One epoch of minibatch SGD; returns the mean minibatch loss.

    Minibatches walk a fresh permutation of the data (re-permuted if the
    epoch needs more examples than the dataset holds). The order depends
    only on ``(config.rng_seed, epoch)``, so any epoch can be replayed.
    ``observer(params)`` receives a copy of the flat parameters after
    every step.
    """
    if dataset.n_features != model.n_inputs or dataset.n_classes != model.n_classes:
        raise DimensionError(
            f"model {model.layer_sizes} does not match dataset ({dataset.n_features} features, "
            f"{dataset.n_classes} classes)"
        )
    rng = np.random.default_rng([config.rng_seed, epoch])
    mb, steps = config.minibatch_size, config.minibatches_per_epoch
    order = _batch_order(len(dataset), mb * steps, rng)
    total = 0.0
    for step in range(steps):
        idx = order[step * mb:(step + 1) * mb]
        try:
            loss, grad = model.loss_and_grad(dataset.inputs[idx], dataset.labels[idx])
        except DivergenceError as exc:
            raise DivergenceError(f"divergence at epoch {epoch} step {step}: {exc}", step=step) from None
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}", step=step)
        model._flat -= config.learning_rate * grad
        total += loss
        if observer is not None:
            observer(model.flatten())
    return total / steps


class SGDMLPClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn wrapper around :class:`MlpModel` trained by :func:`sgd_epoch`.

    ``observer``, if given, is called with the flat parameters after every
    minibatch -- the hook a :class:`~swagstore.swag.SwagPosterior` uses.
    """

    def __init__(self, hidden_layer_sizes=(32, 32), minibatch_size=100, minibatches_per_epoch=600,
                 epochs=1, learning_rate=0.05, random_state=0, observer=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.minibatch_size = minibatch_size
        self.minibatches_per_epoch = minibatches_per_epoch
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.observer = observer

    def _train_config(self):
        return TrainConfig(self.minibatch_size, self.minibatches_per_epoch, self.epochs,
                           self.learning_rate, self.random_state)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        config = self._train_config()
        self.dataset_ = Dataset(X, encoded.astype(np.int64), len(self.classes_))
        sizes = (X.shape[1], *self.hidden_layer_sizes, len(self.classes_))
        self.model_ = MlpModel(sizes, seed=self.random_state)
        self.n_features_in_ = X.shape[1]
        self.loss_curve_ = []
        for epoch in range(config.epochs):
            self.loss_curve_.append(sgd_epoch(self.model_, self.dataset_, config, self.observer, epoch))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_array(X, dtype=np.float64))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

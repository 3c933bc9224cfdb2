"""Streaming low-rank-plus-diagonal Gaussian posterior over SGD iterates.

Each accepted iterate ``theta_t`` updates a running mean and a running raw
second moment (float64), and appends the deviation ``theta_t - mean_t`` as
a column of the deviation matrix ``D`` held in a storage backend. Samples
are drawn as

    mean + s/sqrt(2) * sqrt(diag_var) * z1 + s/sqrt(2 (K - 1)) * D @ z2

with ``z1 ~ N(0, I_P)`` and ``z2 ~ N(0, I_K)``, whose covariance is
``s**2 / 2 * (diag(diag_var) + D D^T / (K - 1))``.
"""

from __future__ import annotations

import io
import json
import math
import struct
import threading
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator

from .coalescer import CoalescerConfig, WriteCoalescer
from .exceptions import (
    ConfigurationError,
    CorruptionError,
    DimensionError,
    EmptyPosteriorError,
    FormatError,
    NonFiniteError,
    SizeRangeError,
)
from .store import InMemoryBackend, Layout

__all__ = [
    "SwagConfig",
    "SwagPosterior",
    "estimate_size",
    "rank_after_epochs",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"SWAG"
CHECKPOINT_VERSION = 1
_MAX_BYTES = 2**63 - 1
_INITIAL_GROWTH_COLUMNS = 64


def estimate_size(n_params, rank, element_width=4):
    """Bytes needed for a ``n_params x rank`` deviation matrix.

    The O(P) moment vectors are not included.
    """
    for label, value in (("n_params", n_params), ("rank", rank), ("element_width", element_width)):
        if int(value) != value or value < 1:
            raise ConfigurationError(f"{label} must be an integer >= 1, got {value!r}")
    size = int(n_params) * int(rank) * int(element_width)
    if size > _MAX_BYTES:
        raise SizeRangeError(f"posterior of {size} bytes exceeds 2**63 - 1")
    return size


def rank_after_epochs(epochs, minibatches_per_epoch=600, burn_in=0, max_columns=None):
    """Deviation-matrix rank after ``epochs`` epochs of per-minibatch updates."""
    accepted = max(int(epochs) * int(minibatches_per_epoch) - int(burn_in), 0)
    return accepted if max_columns is None else min(accepted, int(max_columns))


@dataclass
class SwagConfig:
    """Experiment-level posterior settings; ``build`` makes the estimator."""

    burn_in: int = 0
    max_columns: int | None = None
    scale: float = 1.0
    variance_floor: float = 1e-12
    element_width: int = 4

    def __post_init__(self):
        SwagPosterior(**asdict(self))._validate_params()

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown swag keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def build(self, **params):
        return SwagPosterior(**asdict(self), **params)


def _as_vector(theta, n_features):
    arr = np.asarray(theta, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D parameter vector, got shape {arr.shape}")
    if n_features is not None and arr.shape[0] != n_features:
        raise DimensionError(f"expected {n_features} parameters, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("parameter vector contains NaN or Inf")
    return arr


class SwagPosterior(BaseEstimator):
    """SWAG posterior accumulated one SGD iterate at a time.

    Parameters
    ----------
    burn_in : int
        Number of initial iterates ignored entirely.
    max_columns : int or None
        Cap on stored deviation columns. Once reached, the oldest column is
        overwritten. ``None`` grows storage without bound.
    scale : float
        Sampling scale ``s``.
    variance_floor : float
        Lower bound applied to the diagonal variance.
    element_width : {4, 8}
        Bytes per stored deviation element. Moments are always float64.
    backend : StorageBackend or None
        Where the deviation matrix lives. Defaults to a fresh DRAM backend.
    layout : {"col", "row"}
        Storage layout of the deviation matrix.
    coalesce_columns : int or None
        If set, deviation columns are buffered and written in batches of
        this many columns.
    flush_policy : {"when_full", "explicit"}
        Coalescer drain policy.
    array_name : str
        Name of the deviation array inside the backend.
    """

    def __init__(
        self,
        burn_in=0,
        max_columns=20,
        scale=1.0,
        variance_floor=1e-12,
        element_width=4,
        backend=None,
        layout="col",
        coalesce_columns=None,
        flush_policy="when_full",
        array_name="swag-deviations",
    ):
        self.burn_in = burn_in
        self.max_columns = max_columns
        self.scale = scale
        self.variance_floor = variance_floor
        self.element_width = element_width
        self.backend = backend
        self.layout = layout
        self.coalesce_columns = coalesce_columns
        self.flush_policy = flush_policy
        self.array_name = array_name

    # -- configuration ---------------------------------------------------

    def _validate_params(self):
        if int(self.burn_in) != self.burn_in or self.burn_in < 0:
            raise ConfigurationError(f"burn_in must be an integer >= 0, got {self.burn_in!r}")
        if self.max_columns is not None and (int(self.max_columns) != self.max_columns or self.max_columns < 1):
            raise ConfigurationError(f"max_columns must be None or an integer >= 1, got {self.max_columns!r}")
        if not self.scale > 0:
            raise ConfigurationError(f"scale must be > 0, got {self.scale!r}")
        if not self.variance_floor >= 0:
            raise ConfigurationError(f"variance_floor must be >= 0, got {self.variance_floor!r}")
        if self.element_width not in (4, 8):
            raise ConfigurationError(f"element_width must be 4 or 8, got {self.element_width!r}")
        Layout.parse(self.layout)
        if self.coalesce_columns is not None:
            CoalescerConfig(self.coalesce_columns, self.flush_policy)

    @property
    def is_allocated(self):
        return hasattr(self, "n_features_in_")

    def allocate(self, n_features):
        """Validate parameters and allocate deviation storage for ``n_features``.

        Any previously accumulated state is discarded.
        """
        self._validate_params()
        n_features = int(n_features)
        if n_features < 1:
            raise DimensionError("n_features must be >= 1")
        if self.max_columns is not None and self.max_columns > n_features:
            raise ConfigurationError(
                f"max_columns={self.max_columns} exceeds the parameter count {n_features}"
            )
        self.release()
        self._lock = threading.RLock()
        self.backend_ = self.backend if self.backend is not None else InMemoryBackend()
        capacity = self.max_columns if self.max_columns is not None else _INITIAL_GROWTH_COLUMNS
        self._generation = 0
        self.deviations_handle_ = self.backend_.create_array(
            self.array_name, n_features, capacity, self.element_width, Layout.parse(self.layout)
        )
        self._coalescer = self._make_coalescer()
        self.n_features_in_ = n_features
        self.n_seen_ = 0
        self.n_models_ = 0
        self.mean_ = np.zeros(n_features)
        self.sq_mean_ = np.zeros(n_features)
        return self

    def _make_coalescer(self):
        if self.coalesce_columns is None:
            return None
        return WriteCoalescer(self.backend_, self.deviations_handle_,
                              CoalescerConfig(self.coalesce_columns, self.flush_policy))

    def release(self):
        """Delete the deviation array from its backend and forget all state."""
        handle = getattr(self, "deviations_handle_", None)
        if handle is not None:
            self.backend_.delete_array(handle)
        for attr in ("n_features_in_", "n_seen_", "n_models_", "mean_", "sq_mean_",
                     "deviations_handle_", "backend_", "_coalescer"):
            self.__dict__.pop(attr, None)

    # -- accumulation ----------------------------------------------------

    @property
    def rank_(self):
        """Number of stored deviation columns, ``K``."""
        return self._rank_for(self.n_models_)

    def fit(self, X, y=None):
        """Accumulate a whole trajectory, one iterate per row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DimensionError(f"expected a 2-D trajectory, got shape {X.shape}")
        self.allocate(X.shape[1])
        for theta in X:
            self.update(theta)
        return self

    def partial_fit(self, X, y=None):
        """Accumulate one iterate (1-D) or several (2-D, one per row)."""
        X = np.asarray(X, dtype=np.float64)
        rows = X[None, :] if X.ndim == 1 else X
        if not self.is_allocated:
            self.allocate(rows.shape[-1])
        for theta in rows:
            self.update(theta)
        return self

    def update(self, theta):
        if not self.is_allocated:
            self.allocate(np.shape(theta)[0])
        theta = _as_vector(theta, self.n_features_in_)
        with self._lock:
            self.n_seen_ += 1
            if self.n_seen_ <= self.burn_in:
                return self
            t = self.n_models_ + 1
            self.mean_ += (theta - self.mean_) / t
            self.sq_mean_ += (theta * theta - self.sq_mean_) / t
            self.n_models_ = t
            self._write_column(self._slot(t), theta - self.mean_)
        return self

    def _slot(self, t):
        if self.max_columns is None:
            if t > self.deviations_handle_.cols:
                self._grow(2 * self.deviations_handle_.cols)
            return t - 1
        return (t - 1) % self.max_columns

    def _write_column(self, j, column):
        if self._coalescer is not None:
            self._coalescer.buffered_write_column(j, column)
        else:
            self.backend_.write_column(self.deviations_handle_, j, column)

    def _grow(self, new_cols):
        self._drain()
        old = self.deviations_handle_
        self._generation += 1
        new = self.backend_.create_array(f"{self.array_name}.g{self._generation}", old.rows, new_cols,
                                         old.element_width, old.layout)
        used = min(self.n_models_, old.cols)
        if used:
            block = self.backend_.read_region(old, (0, old.rows), (0, used))
            self.backend_.write_region(new, (0, old.rows), (0, used), block)
        self.backend_.delete_array(old)
        self.deviations_handle_ = new
        self._coalescer = self._make_coalescer()

    def _drain(self):
        if getattr(self, "_coalescer", None) is not None:
            self._coalescer.flush_now()

    def flush(self):
        """Drain buffered columns and make the deviation array durable."""
        self._check_allocated()
        with self._lock:
            self._drain()
            self.backend_.flush(self.deviations_handle_)

    # -- read side -------------------------------------------------------

    def _check_allocated(self):
        if not self.is_allocated:
            raise EmptyPosteriorError("posterior has no storage; call fit/partial_fit first")

    def _check_nonempty(self):
        self._check_allocated()
        if self.n_models_ == 0:
            raise EmptyPosteriorError("no iterates accepted yet (T = 0)")

    def diag_variance(self):
        self._check_nonempty()
        return np.maximum(self.sq_mean_ - self.mean_ ** 2, self.variance_floor)

    def _physical_deviations(self):
        k = self.rank_
        if k == 0:
            return np.zeros((self.n_features_in_, 0))
        self._drain()
        return self.backend_.read_region(self.deviations_handle_, (0, self.n_features_in_), (0, k))

    def deviations(self):
        """The ``P x K`` deviation matrix, oldest column first."""
        self._check_nonempty()
        with self._lock:
            D = self._physical_deviations()
        if self.max_columns is not None and self.n_models_ > self.max_columns:
            D = np.roll(D, -(self.n_models_ % self.max_columns), axis=1)
        return D

    def sample(self, seed=None, diagonal_only=False):
        """One parameter vector drawn from the posterior."""
        return self.sample_batch(1, seed, diagonal_only=diagonal_only)[0]

    def sample_batch(self, n_samples, seed=None, diagonal_only=False):
        """``n_samples`` draws as rows of an ``(n_samples, P)`` array.

        For a given seed the first row equals ``sample(seed)``. With fewer
        than two stored columns only the diagonal term is used.
        """
        self._check_nonempty()
        rng = np.random.default_rng(seed)
        P, K, s = self.n_features_in_, self.rank_, self.scale
        # one (z1, z2) pair per row, so row i does not depend on n_samples
        z = rng.standard_normal((n_samples, P + K))
        out = self.mean_ + (s / math.sqrt(2.0)) * np.sqrt(self.diag_variance()) * z[:, :P]
        if K >= 2 and not diagonal_only:
            D = self.deviations().astype(np.float64)
            c = s / math.sqrt(2.0 * (K - 1))
            # row-wise products: a batched matmul may round differently per batch size
            for i in range(n_samples):
                out[i] += c * (D @ z[i, P:])
        return out

    def covariance(self):
        """Dense covariance of the sampling distribution. Only for small P."""
        var = self.diag_variance()
        cov = np.diag(var)
        K = self.rank_
        if K >= 2:
            D = self.deviations().astype(np.float64)
            cov = cov + D @ D.T / (K - 1)
        return 0.5 * self.scale ** 2 * cov

    def posterior_size_bytes(self):
        self._check_allocated()
        return estimate_size(self.n_features_in_, max(self.rank_, 1), self.element_width)

    # -- persistence -----------------------------------------------------

    def _header(self):
        return {
            "P": self.n_features_in_,
            "T": self.n_models_,
            "total_seen": self.n_seen_,
            "K": self.rank_,
            "K_max": self.max_columns,
            "B": self.burn_in,
            "s": self.scale,
            "eps": self.variance_floor,
            "element_width": self.element_width,
        }

    def to_bytes(self):
        buf = io.BytesIO()
        self.checkpoint(buf)
        return buf.getvalue()

    def checkpoint(self, sink):
        """Write the full state to a binary stream.

        Layout: ``b"SWAG"``, u16 version, u32 header length, UTF-8 JSON
        header, mean and second moment as float64, the deviation matrix
        column-major in storage order at ``element_width``, then a CRC32 of
        everything before it. All integers and reals little-endian.
        """
        self._check_allocated()
        with self._lock:
            header = json.dumps(self._header(), sort_keys=True).encode("utf-8")
            D = self._physical_deviations()
            parts = [
                CHECKPOINT_MAGIC,
                struct.pack("<HI", CHECKPOINT_VERSION, len(header)),
                header,
                self.mean_.astype("<f8").tobytes(),
                self.sq_mean_.astype("<f8").tobytes(),
                np.asarray(D, dtype=f"<f{self.element_width}").tobytes(order="F"),
            ]
        crc = 0
        for part in parts:
            crc = zlib.crc32(part, crc)
            sink.write(part)
        sink.write(struct.pack("<I", crc))

    @classmethod
    def from_bytes(cls, data, backend=None, **params):
        return cls.restore(io.BytesIO(data), backend=backend, **params)

    @classmethod
    def restore(cls, source, backend=None, **params):
        """Rebuild a posterior from :meth:`checkpoint` output.

        Extra keyword arguments set estimator parameters that the format
        does not carry (layout, coalescing, array name).
        """
        data = source.read() if hasattr(source, "read") else bytes(source)
        prefix = 4 + 6
        if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
            raise FormatError("not a SWAG checkpoint (bad magic)")
        if len(data) < prefix:
            raise CorruptionError("checkpoint truncated inside the preamble")
        version, header_len = struct.unpack_from("<HI", data, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        if len(data) < prefix + header_len:
            raise CorruptionError("checkpoint truncated inside the header")
        try:
            header = json.loads(data[prefix:prefix + header_len].decode("utf-8"))
            P, T, seen, K = (int(header[k]) for k in ("P", "T", "total_seen", "K"))
            k_max, burn_in, width = header["K_max"], int(header["B"]), int(header["element_width"])
            scale, floor = float(header["s"]), float(header["eps"])
        except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"malformed checkpoint header: {exc}") from None
        if width not in (4, 8) or P < 1:
            raise FormatError("malformed checkpoint header: bad width or P")
        expected_T = max(seen - burn_in, 0)
        expected_K = expected_T if k_max is None else min(expected_T, int(k_max))
        if T != expected_T or K != expected_K:
            raise FormatError("checkpoint header counts are inconsistent")
        body = prefix + header_len
        total = body + 16 * P + P * K * width + 4
        if len(data) < total:
            raise CorruptionError(f"checkpoint truncated: {len(data)} of {total} bytes")
        if len(data) > total:
            raise FormatError("trailing bytes after checkpoint")
        (crc,) = struct.unpack_from("<I", data, total - 4)
        if zlib.crc32(data[:total - 4]) != crc:
            raise CorruptionError("checkpoint CRC mismatch")

        mean = np.frombuffer(data, "<f8", P, body).astype(np.float64)
        sq_mean = np.frombuffer(data, "<f8", P, body + 8 * P).astype(np.float64)
        D = np.frombuffer(data, f"<f{width}", P * K, body + 16 * P).reshape((P, K), order="F")

        est = cls(burn_in=burn_in, max_columns=k_max, scale=scale, variance_floor=floor,
                  element_width=width, backend=backend, **params)
        est.allocate(P)
        if k_max is None and K > est.deviations_handle_.cols:
            est._grow(max(K, 2 * est.deviations_handle_.cols))
        if K:
            est.backend_.write_region(est.deviations_handle_, (0, P), (0, K), D)
        est.mean_, est.sq_mean_ = mean, sq_mean
        est.n_seen_, est.n_models_ = seen, T
        return est

    @classmethod
    def from_moments(cls, mean, sq_mean, deviations, n_models=None, backend=None, **params):
        """Build a posterior directly from its moments and deviation columns.

        ``deviations`` is ``P x K``, oldest column first. ``n_models``
        defaults to ``K``; ``max_columns`` defaults to ``K``.
        """
        mean = _as_vector(mean, None)
        sq_mean = _as_vector(sq_mean, mean.shape[0])
        D = np.asarray(deviations, dtype=np.float64)
        if D.ndim != 2 or D.shape[0] != mean.shape[0]:
            raise DimensionError(f"deviations must be P x K with P={mean.shape[0]}, got {D.shape}")
        K = D.shape[1]
        n_models = K if n_models is None else int(n_models)
        params.setdefault("max_columns", max(K, 1))
        params.setdefault("burn_in", 0)
        est = cls(backend=backend, **params).allocate(mean.shape[0])
        if K != est._rank_for(n_models):
            raise DimensionError(f"{K} deviation columns given, posterior with T={n_models} holds "
                                 f"{est._rank_for(n_models)}")
        if K:
            if est.max_columns is not None and n_models > est.max_columns:
                D = np.roll(D, n_models % est.max_columns, axis=1)
            est.backend_.write_region(est.deviations_handle_, (0, mean.shape[0]), (0, K), D)
        est.mean_, est.sq_mean_ = mean.copy(), sq_mean.copy()
        est.n_models_ = n_models
        est.n_seen_ = n_models + est.burn_in
        return est

    def _rank_for(self, n_models):
        return n_models if self.max_columns is None else min(n_models, self.max_columns)

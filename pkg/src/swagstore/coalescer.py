"""Column write buffering in front of a storage array.

Pending column writes are held in DRAM and pushed to the backing array as
few, large, sequential region writes: buffered column indices are sorted
and every maximal run of adjacent indices becomes one ``write_region``.

Buffered-but-unflushed columns are volatile; a crash loses them.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import ConfigurationError, DimensionError

__all__ = ["FlushPolicy", "CoalescerConfig", "WriteCoalescer", "merge_runs"]


class FlushPolicy(str, Enum):
    WHEN_FULL = "when_full"
    EXPLICIT = "explicit"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"whenfull": "when_full", "full": "when_full"}
        try:
            return cls(aliases.get(key.replace("_", ""), key))
        except ValueError:
            raise ConfigurationError(f"unknown flush policy {value!r}") from None


@dataclass
class CoalescerConfig:
    capacity_columns: int = 32
    flush_policy: FlushPolicy = FlushPolicy.WHEN_FULL

    def __post_init__(self):
        self.flush_policy = FlushPolicy.parse(self.flush_policy)
        if int(self.capacity_columns) < 1:
            raise ConfigurationError("capacity_columns must be >= 1")
        self.capacity_columns = int(self.capacity_columns)


def merge_runs(indices):
    """Split column indices into maximal runs of consecutive values.

    >>> merge_runs([2, 9, 3, 7])
    [(2, 4), (7, 8), (9, 10)]
    """
    runs = []
    for j in sorted(set(indices)):
        if runs and runs[-1][1] == j:
            runs[-1] = (runs[-1][0], j + 1)
        else:
            runs.append((j, j + 1))
    return runs


class WriteCoalescer:
    """Buffer column writes to ``handle`` on ``backend``.

    With ``FlushPolicy.EXPLICIT`` the buffer is only drained by
    :meth:`flush_now`, even when it exceeds ``capacity_columns``.
    """

    def __init__(self, backend, handle, config=None):
        self.backend = backend
        self.handle = handle
        self.config = config if config is not None else CoalescerConfig()
        self._buffer = {}
        self._lock = threading.RLock()
        self.region_writes = 0

    @property
    def pending(self):
        return len(self._buffer)

    def buffered_write_column(self, j, data):
        j = int(j)
        if not 0 <= j < self.handle.cols:
            raise IndexError(f"column {j} out of range for {self.handle.cols} columns")
        col = np.asarray(data)
        if col.shape != (self.handle.rows,):
            raise DimensionError(f"column length {col.shape} != ({self.handle.rows},)")
        with self._lock:
            # stored at the backing width so read_through matches the post-flush bytes
            self._buffer[j] = col.astype(self.handle.dtype)
            if (self.config.flush_policy is FlushPolicy.WHEN_FULL
                    and len(self._buffer) >= self.config.capacity_columns):
                self.flush_now()

    def read_through(self, j):
        with self._lock:
            if j in self._buffer:
                return self._buffer[j].copy()
        return self.backend.read_column(self.handle, j)

    def flush_now(self):
        with self._lock:
            if not self._buffer:
                return
            rows = self.handle.rows
            for start, stop in merge_runs(self._buffer):
                block = np.stack([self._buffer[j] for j in range(start, stop)], axis=1)
                self.backend.write_region(self.handle, (0, rows), (start, stop), block)
                self.region_writes += 1
            self._buffer.clear()

"""Storage tiers for large 2-D float arrays.

Four backends share one interface:

* ``InMemoryBackend``     -- plain DRAM arrays.
* ``MappedFileBackend``   -- one ``numpy.memmap`` file per array.
* ``SimulatedPMemBackend`` -- DRAM-resident data with a virtual clock that
  charges a latency multiplier on every transfer and a fixed penalty on
  every allocation (persistent-memory direct-access modes).
* ``TieredCacheBackend``  -- an LRU block cache in front of another backend
  (persistent-memory "memory mode", where DRAM caches the slow tier).

All backends return bit-identical data for the same operation trace; they
differ only in statistics, simulated time and durability.

The cost of an access is

    multiplier * (nbytes / reference_bandwidth + transfers * op_latency)

where ``transfers`` is the number of contiguous byte runs the access
touches under the array's layout.
"""

from __future__ import annotations

import copy
import itertools
import re
import shutil
import struct
import tempfile
import threading
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np

from .exceptions import (
    ArrayExistsError,
    ArrayNotFoundError,
    CapacityError,
    ConfigurationError,
    DimensionError,
    FormatError,
    StorageError,
)

__all__ = [
    "Layout",
    "ArrayHandle",
    "BackendStats",
    "BackendConfig",
    "StorageBackend",
    "InMemoryBackend",
    "MappedFileBackend",
    "SimulatedPMemBackend",
    "TieredCacheBackend",
    "make_backend",
    "read_array_file",
    "contiguous_runs",
]

KiB = 1024
MiB = 1024 * KiB

FILE_MAGIC = b"TSTR"
FILE_VERSION = 1
FILE_HEADER_SIZE = 64
_FILE_HEADER = struct.Struct("<4sHQQIB")

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_ids = itertools.count()


class Layout(str, Enum):
    ROW_MAJOR = "row"
    COL_MAJOR = "col"

    @property
    def code(self):
        return 0 if self is Layout.ROW_MAJOR else 1

    @property
    def order(self):
        return "C" if self is Layout.ROW_MAJOR else "F"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        if key in ("row", "rowmajor", "c"):
            return cls.ROW_MAJOR
        if key in ("col", "column", "colmajor", "columnmajor", "f"):
            return cls.COL_MAJOR
        raise ConfigurationError(f"unknown layout {value!r}")

    @classmethod
    def from_code(cls, code):
        return cls.ROW_MAJOR if code == 0 else cls.COL_MAJOR


@dataclass(frozen=True)
class ArrayHandle:
    name: str
    rows: int
    cols: int
    element_width: int
    layout: Layout
    backend_id: str

    @property
    def nbytes(self):
        return self.rows * self.cols * self.element_width

    @property
    def dtype(self):
        return _DTYPES[self.element_width]

    @property
    def shape(self):
        return (self.rows, self.cols)


@dataclass
class BackendStats:
    bytes_read: int = 0
    bytes_written: int = 0
    read_ops: int = 0
    write_ops: int = 0
    transfers: int = 0
    flushes: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    evictions: int = 0
    alloc_wall_time: float = 0.0
    simulated_time: float = 0.0

    def copy(self):
        return copy.copy(self)

    def delta(self, earlier):
        """Counter differences ``self - earlier``."""
        return BackendStats(**{f.name: getattr(self, f.name) - getattr(earlier, f.name) for f in fields(self)})

    def as_dict(self):
        return asdict(self)


_KINDS = {
    "in_memory": "in_memory",
    "inmemory": "in_memory",
    "dram": "in_memory",
    "mapped_file": "mapped_file",
    "mappedfile": "mapped_file",
    "mmap": "mapped_file",
    "simulated_pmem": "simulated_pmem",
    "simulatedpmem": "simulated_pmem",
    "pmem": "simulated_pmem",
    "fsdax": "simulated_pmem",
    "devdax": "simulated_pmem",
    "tiered_cache": "tiered_cache",
    "tieredcache": "tiered_cache",
    "tiered": "tiered_cache",
    "memory_mode": "tiered_cache",
}


@dataclass
class BackendConfig:
    """Declarative description of a backend, loadable from TOML/JSON."""

    kind: str = "in_memory"
    label: str | None = None
    # cost model (SimulatedPMem; InMemory when simulate_latency; TieredCache front)
    latency_multiplier: float = 3.0
    alloc_penalty: float = 0.5
    reference_bandwidth: float = 10e9
    op_latency: float = 100e-9
    flush_latency: float = 1e-6
    simulate_latency: bool = False
    variant: str = "fsdax"
    # MappedFile
    directory: str | None = None
    flush_each_write: bool = False
    # TieredCache
    cache_capacity_bytes: int = 64 * MiB
    block_size_bytes: int = 4 * KiB
    backing: BackendConfig | None = None

    def __post_init__(self):
        key = str(self.kind).strip().lower().replace("-", "_")
        if key not in _KINDS:
            raise ConfigurationError(f"unknown backend kind {self.kind!r}")
        if key in ("fsdax", "devdax"):
            self.variant = key
        self.kind = _KINDS[key]
        if isinstance(self.backing, dict):
            self.backing = BackendConfig.from_dict(self.backing)
        self.validate()

    def validate(self):
        if self.latency_multiplier < 1:
            raise ConfigurationError("latency_multiplier must be >= 1")
        if self.alloc_penalty < 0 or self.flush_latency < 0 or self.op_latency < 0:
            raise ConfigurationError("latencies and penalties must be nonnegative")
        if self.reference_bandwidth <= 0:
            raise ConfigurationError("reference_bandwidth must be positive")
        if self.kind == "tiered_cache":
            if self.block_size_bytes < 1:
                raise ConfigurationError("block_size_bytes must be >= 1")
            if self.cache_capacity_bytes < self.block_size_bytes:
                raise ConfigurationError("cache must hold at least one block")
            if self.backing is not None and self.backing.kind == "tiered_cache":
                raise ConfigurationError("tiered caches cannot be nested")

    @property
    def name(self):
        if self.label:
            return self.label
        if self.kind == "simulated_pmem":
            return self.variant
        return self.kind

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown backend keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_dict() if isinstance(value, BackendConfig) else value
        return out

    @classmethod
    def parse(cls, text):
        """Parse ``kind[:key=value,...]``, e.g. ``tiered:cache_capacity_bytes=8192``."""
        kind, _, rest = str(text).partition(":")
        kwargs = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigurationError(f"expected key=value, got {item!r}")
            kwargs[key.strip()] = _coerce(raw.strip())
        known = {f.name for f in fields(cls)}
        unknown = set(kwargs) - known
        if unknown:
            raise ConfigurationError(f"unknown backend keys: {sorted(unknown)}")
        return cls(kind=kind, **kwargs)


def _coerce(raw):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def contiguous_runs(layout, rows, cols, row_range, col_range):
    """Contiguous element runs ``(offsets, lengths)`` touched by a region.

    Offsets are linear element indices into the array's storage order.
    """
    r0, r1 = row_range
    c0, c1 = col_range
    if layout is Layout.COL_MAJOR:
        if r0 == 0 and r1 == rows:
            return np.array([c0 * rows]), np.array([(c1 - c0) * rows])
        starts = np.arange(c0, c1) * rows + r0
        return starts, np.full(starts.shape, r1 - r0)
    if c0 == 0 and c1 == cols:
        return np.array([r0 * cols]), np.array([(r1 - r0) * cols])
    starts = np.arange(r0, r1) * cols + c0
    return starts, np.full(starts.shape, c1 - c0)


class StorageBackend:
    """Base class: named arrays, layout-aware transfer accounting, stats.

    Subclasses provide ``_allocate`` and may override ``_cost`` (simulated
    seconds for an access) and ``_on_*`` hooks.
    """

    kind = "abstract"

    def __init__(self, config=None):
        self.config = config if config is not None else BackendConfig(kind=self.kind)
        self.backend_id = f"{self.kind}-{next(_ids)}"
        self._arrays = {}
        self._data = {}
        self._array_locks = {}
        self._lock = threading.RLock()
        self._stats = BackendStats()

    # -- catalog -------------------------------------------------------

    def create_array(self, name, rows, cols, element_width=4, layout=Layout.COL_MAJOR):
        layout = Layout.parse(layout)
        if not isinstance(name, str) or not _NAME_RE.match(name):
            raise ConfigurationError(f"invalid array name {name!r}")
        if int(rows) < 1 or int(cols) < 1:
            raise DimensionError(f"array dimensions must be >= 1, got {rows}x{cols}")
        if element_width not in _DTYPES:
            raise ConfigurationError(f"element_width must be 4 or 8, got {element_width}")
        handle = ArrayHandle(name, int(rows), int(cols), int(element_width), layout, self.backend_id)
        with self._lock:
            if name in self._arrays:
                raise ArrayExistsError(f"array {name!r} already exists in {self.backend_id}")
            start = time.perf_counter()
            self._data[name] = self._allocate(handle)
            elapsed = time.perf_counter() - start
            self._arrays[name] = handle
            self._array_locks[name] = threading.RLock()
            self._stats.alloc_wall_time += elapsed
            self._stats.simulated_time += self._alloc_cost(handle)
        return handle

    def delete_array(self, handle):
        name = handle.name if isinstance(handle, ArrayHandle) else handle
        with self._lock:
            self._resolve(name)
            self._release(self._arrays[name])
            del self._arrays[name], self._data[name], self._array_locks[name]

    def get(self, name):
        with self._lock:
            return self._arrays[self._resolve(name)]

    def arrays(self):
        with self._lock:
            return list(self._arrays.values())

    def _resolve(self, name):
        if name not in self._arrays:
            raise ArrayNotFoundError(f"no array {name!r} in {self.backend_id}")
        return name

    def _check(self, handle):
        if handle.backend_id != self.backend_id:
            raise StorageError(f"handle {handle.name!r} belongs to {handle.backend_id}, not {self.backend_id}")
        self._resolve(handle.name)

    # -- data path -----------------------------------------------------

    def write_column(self, handle, j, data):
        self._check_col(handle, j)
        arr = np.asarray(data)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        self.write_region(handle, (0, handle.rows), (j, j + 1), arr)

    def read_column(self, handle, j):
        self._check_col(handle, j)
        return self.read_region(handle, (0, handle.rows), (j, j + 1))[:, 0]

    def write_region(self, handle, row_range, col_range, data):
        self._check(handle)
        rr, cr = self._ranges(handle, row_range, col_range)
        shape = (rr[1] - rr[0], cr[1] - cr[0])
        arr = np.asarray(data)
        if arr.shape != shape:
            if arr.ndim == 1 and arr.size == shape[0] * shape[1] and 1 in shape:
                arr = arr.reshape(shape)
            else:
                raise DimensionError(f"data shape {arr.shape} does not match region {shape}")
        if arr.dtype.kind not in "fiu":
            raise DimensionError(f"non-numeric data of dtype {arr.dtype}")
        nbytes = shape[0] * shape[1] * handle.element_width
        with self._array_locks[handle.name]:
            self._store_write(handle, rr, cr, arr.astype(handle.dtype, copy=False))
            with self._lock:
                self._account(handle, rr, cr, nbytes, write=True)
            if self._flush_after_write():
                self.flush(handle)

    def read_region(self, handle, row_range, col_range):
        self._check(handle)
        rr, cr = self._ranges(handle, row_range, col_range)
        nbytes = (rr[1] - rr[0]) * (cr[1] - cr[0]) * handle.element_width
        with self._array_locks[handle.name]:
            out = self._store_read(handle, rr, cr)
            with self._lock:
                self._account(handle, rr, cr, nbytes, write=False)
        return out

    def read_all(self, handle):
        return self.read_region(handle, (0, handle.rows), (0, handle.cols))

    def _check_col(self, handle, j):
        if not 0 <= int(j) < handle.cols:
            raise IndexError(f"column {j} out of range for {handle.cols} columns")

    @staticmethod
    def _ranges(handle, row_range, col_range):
        r0, r1 = (int(v) for v in row_range)
        c0, c1 = (int(v) for v in col_range)
        if not (0 <= r0 < r1 <= handle.rows and 0 <= c0 < c1 <= handle.cols):
            raise IndexError(
                f"region rows[{r0}:{r1}] cols[{c0}:{c1}] out of bounds for {handle.rows}x{handle.cols}"
            )
        return (r0, r1), (c0, c1)

    def _store_write(self, handle, rr, cr, arr):
        self._data[handle.name][rr[0]:rr[1], cr[0]:cr[1]] = arr

    def _store_read(self, handle, rr, cr):
        return np.array(self._data[handle.name][rr[0]:rr[1], cr[0]:cr[1]])

    def _account(self, handle, rr, cr, nbytes, write):
        starts, lengths = contiguous_runs(handle.layout, handle.rows, handle.cols, rr, cr)
        s = self._stats
        if write:
            s.bytes_written += nbytes
            s.write_ops += 1
        else:
            s.bytes_read += nbytes
            s.read_ops += 1
        s.transfers += len(starts)
        s.simulated_time += self._access_cost(handle, starts, lengths, nbytes, write)

    def _flush_after_write(self):
        return False

    # -- durability ----------------------------------------------------

    def flush(self, handle):
        self._check(handle)
        with self._array_locks[handle.name]:
            with self._lock:
                extra = self._flush(handle) or 0.0
                self._stats.flushes += 1
                self._stats.simulated_time += extra + self._flush_cost(handle)

    def flush_all(self):
        for handle in self.arrays():
            self.flush(handle)

    def close(self):
        with self._lock:
            for name in list(self._arrays):
                self.delete_array(name)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- stats ---------------------------------------------------------

    def stats(self):
        with self._lock:
            return self._stats.copy()

    def reset_stats(self):
        """Zero all counters; the simulated clock keeps running."""
        with self._lock:
            self._stats = BackendStats(simulated_time=self._stats.simulated_time)

    # -- hooks ---------------------------------------------------------

    def _allocate(self, handle):
        return np.zeros(handle.shape, dtype=handle.dtype, order=handle.layout.order)

    def _release(self, handle):
        pass

    def _flush(self, handle):
        """Make ``handle`` durable; may return extra simulated seconds."""

    def _alloc_cost(self, handle):
        return 0.0

    def _access_cost(self, handle, starts, lengths, nbytes, write):
        return 0.0

    def _flush_cost(self, handle):
        return 0.0

    def _transfer_cost(self, nbytes, transfers, multiplier):
        cfg = self.config
        return multiplier * (nbytes / cfg.reference_bandwidth + transfers * cfg.op_latency)

    def __repr__(self):
        return f"<{type(self).__name__} {self.backend_id} arrays={len(self._arrays)}>"


class InMemoryBackend(StorageBackend):
    """DRAM arrays. With ``simulate_latency`` it charges the reference cost
    model at multiplier 1, serving as the accounting baseline."""

    kind = "in_memory"

    def _access_cost(self, handle, starts, lengths, nbytes, write):
        if not self.config.simulate_latency:
            return 0.0
        return self._transfer_cost(nbytes, len(starts), 1.0)

    def _flush_cost(self, handle):
        return self.config.flush_latency if self.config.simulate_latency else 0.0


class SimulatedPMemBackend(StorageBackend):
    kind = "simulated_pmem"

    def _alloc_cost(self, handle):
        return self.config.alloc_penalty

    def _access_cost(self, handle, starts, lengths, nbytes, write):
        return self._transfer_cost(nbytes, len(starts), self.config.latency_multiplier)

    def _flush_cost(self, handle):
        return self.config.latency_multiplier * self.config.flush_latency


class MappedFileBackend(StorageBackend):
    """Arrays stored as ``<directory>/<name>.arr`` memory-mapped files.

    File layout: a 64-byte little-endian header (magic ``TSTR``, u16
    version, u64 rows, u64 cols, u32 element width, u8 layout code with
    0=row-major and 1=column-major, zero padding) followed by raw
    little-endian data in the declared layout.
    """

    kind = "mapped_file"

    def __init__(self, config=None):
        super().__init__(config)
        if self.config.directory is None:
            self.directory = Path(tempfile.mkdtemp(prefix="swagstore-mmap-"))
            self._owns_directory = True
        else:
            self.directory = Path(self.config.directory)
            self.directory.mkdir(parents=True, exist_ok=True)
            self._owns_directory = False

    def path_for(self, handle_or_name):
        name = handle_or_name.name if isinstance(handle_or_name, ArrayHandle) else handle_or_name
        return self.directory / f"{name}.arr"

    def _allocate(self, handle):
        path = self.path_for(handle)
        if path.exists():
            raise ArrayExistsError(f"file {path} already exists")
        try:
            free = shutil.disk_usage(self.directory).free
        except OSError as exc:
            raise StorageError(f"cannot stat {self.directory}: {exc}") from exc
        if handle.nbytes > free:
            raise CapacityError(f"{handle.nbytes} bytes requested, {free} free in {self.directory}")
        header = _FILE_HEADER.pack(
            FILE_MAGIC, FILE_VERSION, handle.rows, handle.cols, handle.element_width, handle.layout.code
        ).ljust(FILE_HEADER_SIZE, b"\0")
        try:
            with open(path, "wb") as fh:
                fh.write(header)
                fh.truncate(FILE_HEADER_SIZE + handle.nbytes)
            return np.memmap(path, dtype=handle.dtype, mode="r+", offset=FILE_HEADER_SIZE,
                             shape=handle.shape, order=handle.layout.order)
        except OSError as exc:
            raise StorageError(f"cannot create {path}: {exc}") from exc

    def attach(self, name):
        """Register an existing ``.arr`` file under this backend."""
        path = self.path_for(name)
        rows, cols, width, layout = _read_header(path)
        handle = ArrayHandle(name, rows, cols, width, layout, self.backend_id)
        with self._lock:
            if name in self._arrays:
                raise ArrayExistsError(f"array {name!r} already attached")
            self._data[name] = np.memmap(path, dtype=handle.dtype, mode="r+", offset=FILE_HEADER_SIZE,
                                         shape=handle.shape, order=layout.order)
            self._arrays[name] = handle
            self._array_locks[name] = threading.RLock()
        return handle

    def _flush(self, handle):
        try:
            self._data[handle.name].flush()
        except OSError as exc:
            raise StorageError(f"flush of {self.path_for(handle)} failed: {exc}") from exc

    def _flush_after_write(self):
        return self.config.flush_each_write

    def _release(self, handle):
        self._data[handle.name].flush()
        self.path_for(handle).unlink(missing_ok=True)

    def detach(self, handle):
        """Drop an array from the catalog but keep its file on disk."""
        name = handle.name if isinstance(handle, ArrayHandle) else handle
        with self._lock:
            self._resolve(name)
            self._data[name].flush()
            del self._arrays[name], self._data[name], self._array_locks[name]

    def close(self):
        with self._lock:
            if self._owns_directory:
                super().close()
                shutil.rmtree(self.directory, ignore_errors=True)
            else:
                for name in list(self._arrays):
                    self.detach(name)


def _read_header(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read(FILE_HEADER_SIZE)
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if len(raw) < FILE_HEADER_SIZE:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols, width, code = _FILE_HEADER.unpack_from(raw)
    if magic != FILE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FILE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if width not in _DTYPES or code not in (0, 1):
        raise FormatError(f"{path}: bad element width {width} or layout code {code}")
    return rows, cols, width, Layout.from_code(code)


def read_array_file(path):
    """Read an ``.arr`` file with plain file I/O, independent of any backend."""
    rows, cols, width, layout = _read_header(path)
    with open(path, "rb") as fh:
        fh.seek(FILE_HEADER_SIZE)
        payload = fh.read(rows * cols * width)
    if len(payload) != rows * cols * width:
        raise FormatError(f"{path}: truncated payload")
    flat = np.frombuffer(payload, dtype=_DTYPES[width])
    return flat.reshape((rows, cols), order=layout.order).copy()


class TieredCacheBackend(StorageBackend):
    """LRU block cache over a slower backing backend.

    Data always lives in the backing store; the cache is a cost model. Every
    access pays front (multiplier 1) transfer cost; each touched block that
    misses is fetched from the backing store, evicting the least recently
    used block (written back first if dirty) when the cache is full.
    Flushes do not write dirty blocks back.
    """

    kind = "tiered_cache"

    def __init__(self, config=None):
        super().__init__(config)
        backing_cfg = self.config.backing
        if backing_cfg is None:
            backing_cfg = BackendConfig(kind="simulated_pmem", alloc_penalty=0.0)
        self.backing = make_backend(backing_cfg)
        self.block_size = self.config.block_size_bytes
        self.capacity_blocks = self.config.cache_capacity_bytes // self.block_size
        self._cache = OrderedDict()

    def _allocate(self, handle):
        self.backing.create_array(handle.name, handle.rows, handle.cols, handle.element_width, handle.layout)
        return None

    def _release(self, handle):
        for key in [k for k in self._cache if k[0] == handle.name]:
            del self._cache[key]
        self.backing.delete_array(handle.name)

    def _backing_handle(self, handle):
        return self.backing.get(handle.name)

    def _store_write(self, handle, rr, cr, arr):
        bh = self._backing_handle(handle)
        self.backing._store_write(bh, rr, cr, arr)

    def _store_read(self, handle, rr, cr):
        return self.backing._store_read(self._backing_handle(handle), rr, cr)

    def _touched_blocks(self, handle, starts, lengths):
        width = handle.element_width
        first = (starts * width) // self.block_size
        last = ((starts + lengths) * width - 1) // self.block_size
        if len(first) == 1:
            return range(int(first[0]), int(last[0]) + 1)
        counts = last - first + 1
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        blocks = np.repeat(first, counts) + offsets
        # first-touch order, repeats dropped
        _, idx = np.unique(blocks, return_index=True)
        return blocks[np.sort(idx)].tolist()

    def _access_cost(self, handle, starts, lengths, nbytes, write):
        cost = self._transfer_cost(nbytes, len(starts), 1.0)
        s = self._stats
        for block in self._touched_blocks(handle, starts, lengths):
            key = (handle.name, block)
            if key in self._cache:
                s.cache_hits += 1
                self._cache.move_to_end(key)
                if write:
                    self._cache[key] = True
                continue
            s.cache_misses += 1
            if len(self._cache) >= self.capacity_blocks:
                victim, dirty = self._cache.popitem(last=False)
                s.evictions += 1
                if dirty:
                    cost += self._backing_transfer(victim[0], write=True)
            cost += self._backing_transfer(handle.name, write=False)
            self._cache[key] = write
        return cost

    def _backing_transfer(self, name, write):
        before = self.backing._stats.simulated_time
        bh = self.backing.get(name)
        nbytes = self.block_size
        with self.backing._lock:
            bs = self.backing._stats
            if write:
                bs.bytes_written += nbytes
                bs.write_ops += 1
            else:
                bs.bytes_read += nbytes
                bs.read_ops += 1
            bs.transfers += 1
            bs.simulated_time += self.backing._access_cost(bh, np.zeros(1), np.ones(1), nbytes, write)
            return bs.simulated_time - before

    def _flush_cost(self, handle):
        # The cache is transparent and volatile: a flush reaches the front
        # tier only, dirty blocks stay cached until evicted.
        return self.config.flush_latency

    def cached_blocks(self):
        with self._lock:
            return len(self._cache)

    def close(self):
        super().close()
        self.backing.close()


_BACKENDS = {
    "in_memory": InMemoryBackend,
    "mapped_file": MappedFileBackend,
    "simulated_pmem": SimulatedPMemBackend,
    "tiered_cache": TieredCacheBackend,
}


def make_backend(config=None, **overrides):
    """Build a backend from a ``BackendConfig``, a dict, a spec string or a kind name."""
    if config is None:
        config = BackendConfig(**overrides)
    elif isinstance(config, str):
        config = BackendConfig.parse(config)
        if overrides:
            config = BackendConfig.from_dict({**config.to_dict(), **overrides})
    elif isinstance(config, dict):
        config = BackendConfig.from_dict({**config, **overrides})
    elif overrides:
        config = BackendConfig.from_dict({**config.to_dict(), **overrides})
    return _BACKENDS[config.kind](config)

"""Benchmark harness: per-phase timing of posterior accumulation per backend.

One experiment trains the MLP for a number of epochs while a SWAG posterior
whose deviation matrix lives on the configured backend is updated after
every minibatch. The model trajectory depends only on the seeds, so
backends differ in timing alone. Wall-clock and simulated-clock time are
recorded per (repetition, epoch, phase).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .coalescer import CoalescerConfig
from .exceptions import ConfigurationError, DivergenceError, MissingBaselineError, StorageError
from .store import BackendConfig, Layout, make_backend
from .swag import SwagConfig, estimate_size, rank_after_epochs
from .trainer import PRESETS, MlpModel, TrainConfig, load_mnist, sgd_epoch, synthetic_dataset

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "PHASES",
    "CSV_FIELDS",
    "TimingRecord",
    "ExperimentSpec",
    "ExperimentResult",
    "load_experiments",
    "run_experiment",
    "summarize",
    "layout_pathology",
    "emit",
    "load_results",
]

log = logging.getLogger(__name__)

PHASES = ("Alloc", "Train", "PosteriorUpdate", "Flush", "Sample")
CSV_FIELDS = ["backend", "repetition", "epoch", "phase", "wall_seconds", "simulated_seconds",
              "bytes_read", "bytes_written", "cache_misses", "evictions"]
_GIB = 1024**3


@dataclass
class TimingRecord:
    backend: str
    repetition: int
    epoch: int
    phase: str
    wall_seconds: float
    simulated_seconds: float
    bytes_read: int = 0
    bytes_written: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    evictions: int = 0
    transfers: int = 0
    flushes: int = 0
    status: str = "ok"

    @classmethod
    def from_delta(cls, backend, repetition, epoch, phase, wall, delta, status="ok"):
        return cls(backend, repetition, epoch, phase, wall, delta.simulated_time, delta.bytes_read,
                   delta.bytes_written, delta.cache_hits, delta.cache_misses, delta.evictions,
                   delta.transfers, delta.flushes, status)

    def csv_row(self):
        return [self.backend, self.repetition, self.epoch, self.phase, f"{self.wall_seconds:.6f}",
                f"{self.simulated_seconds:.6f}", self.bytes_read, self.bytes_written,
                self.cache_misses, self.evictions]


@dataclass
class ExperimentSpec:
    backend: BackendConfig = field(default_factory=BackendConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    swag: SwagConfig = field(default_factory=SwagConfig)
    repetitions: int = 3
    coalescer: CoalescerConfig | None = None
    layout: Layout = Layout.COL_MAJOR
    output_dir: str | None = None
    dataset: str = "synthetic"
    synthetic_samples: int = 6000
    model: str | tuple = "desk"
    sample_count: int = 0

    def __post_init__(self):
        self.layout = Layout.parse(self.layout)
        if int(self.repetitions) < 1:
            raise ConfigurationError("repetitions must be >= 1")
        if self.sample_count < 0:
            raise ConfigurationError("sample_count must be >= 0")

    @property
    def layer_sizes(self):
        return PRESETS[self.model] if isinstance(self.model, str) else tuple(self.model)

    @property
    def max_columns(self):
        """Configured column cap, else the rank reached by the last epoch."""
        if self.swag.max_columns is not None:
            return self.swag.max_columns
        rank = rank_after_epochs(self.train.epochs, self.train.minibatches_per_epoch, self.swag.burn_in)
        return max(rank, 1)

    def to_dict(self):
        return {
            "backend": self.backend.to_dict(),
            "train": self.train.to_dict(),
            "swag": self.swag.to_dict(),
            "repetitions": self.repetitions,
            "coalescer": None if self.coalescer is None else {
                "capacity_columns": self.coalescer.capacity_columns,
                "flush_policy": self.coalescer.flush_policy.value},
            "layout": self.layout.value,
            "output_dir": self.output_dir,
            "dataset": self.dataset,
            "synthetic_samples": self.synthetic_samples,
            "model": self.model if isinstance(self.model, str) else list(self.model),
            "sample_count": self.sample_count,
        }


_TOP_KEYS = {"backend", "backends", "train", "swag", "repetitions", "coalescer", "coalesce_columns",
             "flush_policy", "layout", "output_dir", "dataset", "synthetic_samples", "model",
             "sample_count"}


def _specs_from_dict(data):
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigurationError(f"unknown experiment keys: {sorted(unknown)}")
    coalescer = data.get("coalescer")
    if coalescer is None and data.get("coalesce_columns") is not None:
        coalescer = {"capacity_columns": data["coalesce_columns"],
                     "flush_policy": data.get("flush_policy", "when_full")}
    common = dict(
        train=TrainConfig.from_dict(data.get("train", {})),
        swag=SwagConfig.from_dict(data.get("swag", {})),
        repetitions=data.get("repetitions", 3),
        coalescer=CoalescerConfig(**coalescer) if coalescer else None,
        layout=data.get("layout", "col"),
        output_dir=data.get("output_dir"),
        dataset=data.get("dataset", "synthetic"),
        synthetic_samples=data.get("synthetic_samples", 6000),
        model=data.get("model", "desk"),
        sample_count=data.get("sample_count", 0),
    )
    backends = data.get("backends")
    if backends is None:
        backends = [data.get("backend", {})]
    return [ExperimentSpec(backend=BackendConfig.from_dict(b), **common) for b in backends]


def load_experiments(path):
    """Read a TOML or JSON experiment file into one spec per backend."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".json":
        data = json.loads(raw)
    else:
        data = tomllib.loads(raw.decode("utf-8"))
    return _specs_from_dict(data)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    records: list
    checkpoints: list
    n_params: int
    rank: int

    @property
    def backend(self):
        return self.spec.backend.name

    @property
    def checkpoint_digest(self):
        return hashlib.sha256(self.checkpoints[-1]).hexdigest() if self.checkpoints else None

    def meta(self):
        return {
            "backend": self.backend,
            "kind": self.spec.backend.kind,
            "epochs": self.spec.train.epochs,
            "repetitions": self.spec.repetitions,
            "n_params": self.n_params,
            "rank": self.rank,
            "element_width": self.spec.swag.element_width,
            "checkpoint_sha256": self.checkpoint_digest,
            "spec": self.spec.to_dict(),
        }

    def to_json(self):
        return {"meta": self.meta(), "records": [asdict(r) for r in self.records]}


def _load_dataset(spec):
    if spec.dataset == "synthetic":
        sizes = spec.layer_sizes
        return synthetic_dataset(spec.train.rng_seed, spec.synthetic_samples, sizes[0], sizes[-1])
    return load_mnist(spec.dataset)


def _backend_for_rep(spec, rep):
    cfg = spec.backend
    if spec.output_dir is not None and cfg.kind == "mapped_file" and cfg.directory is None:
        cfg = replace(cfg, directory=str(Path(spec.output_dir) / "arrays" / cfg.name / f"rep{rep}"))
    return make_backend(cfg)


def run_experiment(spec, dataset=None):
    """Run every repetition of ``spec``; return timing records and final checkpoints."""
    dataset = dataset if dataset is not None else _load_dataset(spec)
    name = spec.backend.name
    records, checkpoints = [], []
    n_params = MlpModel(spec.layer_sizes).n_params
    coalesce = spec.coalescer
    rank = 0
    for rep in range(spec.repetitions):
        backend = _backend_for_rep(spec, rep)
        try:
            model = MlpModel(spec.layer_sizes, seed=spec.train.rng_seed)
            swag = replace(spec.swag, max_columns=spec.max_columns).build(
                backend=backend,
                layout=spec.layout,
                coalesce_columns=None if coalesce is None else coalesce.capacity_columns,
                flush_policy="when_full" if coalesce is None else coalesce.flush_policy,
            )

            def phase(epoch, label, fn):
                before = backend.stats()
                start = time.perf_counter()
                fn()
                wall = time.perf_counter() - start
                rec = TimingRecord.from_delta(name, rep, epoch, label, wall, backend.stats().delta(before))
                records.append(rec)
                return rec

            try:
                phase(0, "Alloc", lambda: swag.allocate(n_params))
            except StorageError as exc:
                raise StorageError(f"[{name} rep {rep}] allocation failed: {exc}") from exc

            update_wall = [0.0]

            def observe(theta):
                start = time.perf_counter()
                swag.update(theta)
                update_wall[0] += time.perf_counter() - start

            for epoch in range(1, spec.train.epochs + 1):
                update_wall[0] = 0.0
                before = backend.stats()
                start = time.perf_counter()
                try:
                    sgd_epoch(model, dataset, spec.train, observe, epoch - 1)
                except DivergenceError as exc:
                    log.warning("%s rep %d diverged: %s", name, rep, exc)
                    records.append(TimingRecord(name, rep, epoch, "Train", time.perf_counter() - start,
                                                0.0, status="diverged"))
                    break
                total = time.perf_counter() - start
                delta = backend.stats().delta(before)
                records.append(TimingRecord(name, rep, epoch, "Train", total - update_wall[0], 0.0))
                records.append(TimingRecord.from_delta(name, rep, epoch, "PosteriorUpdate",
                                                       update_wall[0], delta))
                phase(epoch, "Flush", swag.flush)
                if spec.sample_count and swag.n_models_:
                    phase(epoch, "Sample", lambda: swag.sample_batch(spec.sample_count, epoch))
            rank = swag.rank_
            blob = swag.to_bytes()
            checkpoints.append(blob)
            if spec.output_dir is not None:
                out = Path(spec.output_dir)
                out.mkdir(parents=True, exist_ok=True)
                (out / f"posterior-{name}-rep{rep}.swag").write_bytes(blob)
            swag.release()
        finally:
            backend.close()
    return ExperimentResult(spec, records, checkpoints, n_params, rank)


def _mean_std(values):
    values = list(values)
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def summarize(results, baseline="in_memory"):
    """Per-backend totals, per-epoch mean/std, and ratios to the baseline.

    ``baseline`` names the backend whose totals divide every other
    backend's; a :class:`MissingBaselineError` is raised if no experiment
    with the same epoch count carries that name. Pass ``baseline=None`` to
    skip ratios.
    """
    rows = []
    for res in results:
        reps = sorted({r.repetition for r in res.records})
        totals_wall = [sum(r.wall_seconds for r in res.records if r.repetition == k) for k in reps]
        totals_sim = [sum(r.simulated_seconds for r in res.records if r.repetition == k) for k in reps]
        per_epoch = []
        epochs = sorted({r.epoch for r in res.records if r.epoch > 0})
        for e in epochs:
            wall = [sum(r.wall_seconds for r in res.records if r.repetition == k and r.epoch == e)
                    for k in reps]
            sim = [sum(r.simulated_seconds for r in res.records if r.repetition == k and r.epoch == e)
                   for k in reps]
            wm, ws = _mean_std(wall)
            sm, ss = _mean_std(sim)
            per_epoch.append({"epoch": e, "wall_mean": wm, "wall_std": ws, "sim_mean": sm, "sim_std": ss})
        phases = {}
        for p in PHASES:
            sel = [r for r in res.records if r.phase == p]
            if sel:
                phases[p] = {"wall_seconds": sum(r.wall_seconds for r in sel) / len(reps),
                             "simulated_seconds": sum(r.simulated_seconds for r in sel) / len(reps)}
        wm, ws = _mean_std(totals_wall)
        sm, ss = _mean_std(totals_sim)
        size = estimate_size(res.n_params, max(res.rank, 1), res.spec.swag.element_width)
        rows.append({
            "backend": res.backend,
            "kind": res.spec.backend.kind,
            "epochs": res.spec.train.epochs,
            "repetitions": len(reps),
            "total_wall_mean": wm,
            "total_wall_std": ws,
            "total_sim_mean": sm,
            "total_sim_std": ss,
            "phases": phases,
            "per_epoch": per_epoch,
            "posterior_bytes": size,
            "posterior_gib": round(size / _GIB, 3),
            "diverged": any(r.status != "ok" for r in res.records),
        })
    if baseline is not None:
        for row in rows:
            base = next((b for b in rows if b["backend"] == baseline and b["epochs"] == row["epochs"]), None)
            if base is None:
                raise MissingBaselineError(f"no {baseline!r} baseline with {row['epochs']} epochs")
            row["ratio_wall"] = _ratio(row["total_wall_mean"], base["total_wall_mean"])
            row["ratio_sim"] = _ratio(row["total_sim_mean"], base["total_sim_mean"])
    return {"baseline": baseline, "rows": rows}


def _ratio(a, b):
    return a / b if b > 0 else None


def layout_pathology(rows, cols, backend, n_writes=None, element_width=4, seed=0):
    """Repeated column writes under row-major vs column-major storage.

    Columns are written cyclically, ``n_writes`` times (default ``2 * cols``).
    For each layout the result reports transfers, byte counts, wall and
    simulated time, cache counters, and the cumulative miss count after
    each write.
    """
    cfg = backend if isinstance(backend, BackendConfig) else BackendConfig.parse(backend)
    n_writes = 2 * cols if n_writes is None else int(n_writes)
    column = np.random.default_rng(seed).standard_normal(rows)
    out = {"rows": rows, "cols": cols, "writes": n_writes, "backend": cfg.name}
    for layout in (Layout.ROW_MAJOR, Layout.COL_MAJOR):
        be = make_backend(cfg)
        try:
            handle = be.create_array("pathology", rows, cols, element_width, layout)
            be.reset_stats()
            before = be.stats()
            misses = []
            start = time.perf_counter()
            for i in range(n_writes):
                be.write_column(handle, i % cols, column)
                misses.append(be.stats().cache_misses - before.cache_misses)
            wall = time.perf_counter() - start
            d = be.stats().delta(before)
        finally:
            be.close()
        out[layout.value] = {
            "transfers": d.transfers,
            "transfers_per_write": d.transfers / n_writes,
            "bytes_written": d.bytes_written,
            "wall_seconds": wall,
            "simulated_seconds": d.simulated_time,
            "cache_hits": d.cache_hits,
            "cache_misses": d.cache_misses,
            "evictions": d.evictions,
            "miss_trace": misses,
        }
    return out


def emit(results, summary=None, output_dir=".", formats=("csv", "json")):
    """Write ``records.csv``, ``results.json`` and ``summary.json``; return the paths."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        records = [r for res in results for r in res.records]
        if "csv" in formats:
            path = out / "records.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(CSV_FIELDS)
                writer.writerows(r.csv_row() for r in records)
            paths.append(path)
        if "json" in formats:
            path = out / "results.json"
            path.write_text(json.dumps({"experiments": [res.to_json() for res in results]}, indent=2))
            paths.append(path)
            if summary is not None:
                path = out / "summary.json"
                path.write_text(json.dumps(summary, indent=2, default=_json_default))
                paths.append(path)
    except OSError as exc:
        raise StorageError(f"cannot write results to {out}: {exc}") from exc
    return paths


def _json_default(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def load_results(directory):
    """Re-read every ``results.json`` under ``directory`` into ExperimentResults."""
    results = []
    for path in sorted(Path(directory).rglob("results.json")):
        for exp in json.loads(path.read_text())["experiments"]:
            meta = exp["meta"]
            spec = _specs_from_dict({**meta["spec"], "backend": meta["spec"]["backend"]})[0]
            records = [TimingRecord(**r) for r in exp["records"]]
            results.append(ExperimentResult(spec, records, [], meta["n_params"], meta["rank"]))
    return results

"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import math
import os
import statistics
import struct
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import record_acceptance
from swagstore.bayes import bma_predict, evaluate, point_predict
from swagstore.bench import ExperimentSpec, run_experiment, summarize
from swagstore.coalescer import CoalescerConfig, WriteCoalescer
from swagstore.exceptions import IdxFormatError
from swagstore.store import BackendConfig, make_backend
from swagstore.swag import SwagConfig, SwagPosterior, estimate_size, rank_after_epochs
from swagstore.trainer import (
    PRESETS,
    Dataset,
    MlpModel,
    TrainConfig,
    gradient,
    load_mnist,
    parse_idx,
    sgd_epoch,
    synthetic_dataset,
)

pytestmark = pytest.mark.acceptance
GIB = 1024**3


@contextmanager
def criterion(number, title, limit):
    box = {"detail": ""}
    start = time.perf_counter()
    try:
        yield box
    except BaseException as exc:
        record_acceptance(number, title, False, f"{type(exc).__name__}: {exc}".splitlines()[0])
        raise
    elapsed = time.perf_counter() - start
    ok = limit is None or elapsed < limit
    budget = "" if limit is None else f" < {limit:g}s"
    record_acceptance(number, title, ok, f"{box['detail']} [{elapsed:.2f}s{budget}]")
    assert ok, f"criterion {number} took {elapsed:.2f}s"


@pytest.fixture(scope="module")
def desk_data():
    return synthetic_dataset(0, 6000)


def _backend_specs(tmp_path):
    return {
        "in_memory": "in_memory",
        "mapped_file": f"mapped_file:directory={tmp_path}",
        "simulated_pmem": "simulated_pmem",
        "tiered_cache": "tiered:cache_capacity_bytes=4096,block_size_bytes=256",
    }


def test_01_moment_oracle():
    with criterion(1, "moment oracle equivalence", 10) as box:
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(100):
            P = int(rng.integers(1, 1001))
            T = int(rng.integers(1, 501))
            X = rng.normal(rng.normal(0, 1, P), rng.uniform(0.01, 2, P), (T, P))
            post = SwagPosterior(max_columns=min(20, P)).fit(X)
            hi = X.astype(np.longdouble)
            mean = hi.sum(axis=0) / T
            sq = (hi * hi).sum(axis=0) / T
            for got, ref in ((post.mean_, mean), (post.sq_mean_, sq)):
                rel = np.abs(got - ref) / np.maximum(np.abs(ref), np.finfo(float).tiny)
                worst = max(worst, float(rel.max()))
        box["detail"] = f"max relative error {worst:.2e} <= 1e-9 over 100 trajectories"
        assert worst <= 1e-9


def test_02_deviation_oracle():
    with criterion(2, "deviation-matrix oracle", 1) as box:
        rng = np.random.default_rng(202)
        checked = 0
        for width, dtype in ((4, np.float32), (8, np.float64)):
            for _ in range(10):
                P = int(rng.integers(1, 21))
                T = int(rng.integers(1, 51))
                X = rng.standard_normal((T, P))
                post = SwagPosterior(max_columns=None, element_width=width).fit(X)
                # pure-Python float recurrence, cast to the storage width
                m = [0.0] * P
                expected = []
                for t, row in enumerate(X.tolist(), start=1):
                    m = [mi + (xi - mi) / t for mi, xi in zip(m, row)]
                    expected.append([xi - mi for xi, mi in zip(row, m)])
                ref = np.array(expected, dtype=np.float64).T.astype(dtype)
                assert post.deviations().dtype == dtype
                assert post.deviations().tobytes() == ref.tobytes()
                checked += T
        box["detail"] = f"{checked} columns bit-identical (width 4 and 8)"


def test_03_sampling_correctness():
    with criterion(3, "sampling correctness", 30) as box:
        mean = np.array([0.5, -1.0, 2.0, 0.0, 1.25, -0.75, 3.0, -2.5])
        var = np.array([1.0, 0.5, 2.0, 1.5, 0.25, 1.0, 0.75, 2.0])
        D = np.array([
            [1.0, -0.5, 0.25, -0.75],
            [0.5, 0.5, -1.0, 0.0],
            [-1.0, 0.25, 0.5, 0.25],
            [0.0, 1.0, -0.5, -0.5],
            [0.75, -0.25, 0.0, -0.5],
            [-0.5, 0.0, 0.75, -0.25],
            [0.25, -1.0, 0.5, 0.25],
            [1.0, 0.5, -0.25, -1.25],
        ])
        post = SwagPosterior.from_moments(mean, var + mean ** 2, D, max_columns=4)
        # target built from the stored matrices, not from covariance()
        stored_var = post.diag_variance()
        stored_D = post.deviations().astype(np.float64)
        assert np.array_equal(stored_D, D)
        target = 0.5 * (np.diag(stored_var) + stored_D @ stored_D.T / 3)
        N = 200_000
        draws = post.sample_batch(N, seed=2024)
        emp_mean = draws.mean(axis=0)
        se = np.sqrt(np.diag(target) / N)
        z = np.abs(emp_mean - mean) / se
        cov_err = np.abs(np.cov(draws, rowvar=False) - target).max()
        box["detail"] = f"mean max |z| {z.max():.2f} <= 3; cov max abs err {cov_err:.4f} <= 5e-2"
        assert (z <= 3).all()
        assert cov_err <= 5e-2


def test_04_size_formula_vs_table():
    with criterion(4, "size formula and rank mapping vs reported table", None) as box:
        table = {600: 6.28, 15_000: 156.33}
        errs = []
        for rank, reported in table.items():
            gib = estimate_size(2_800_000, rank, 4) / GIB
            errs.append(abs(gib - reported) / reported)
        ranks = [rank_after_epochs(e, 600) for e in (1, 25, 50, 75)]
        box["detail"] = (f"size rel err {max(errs):.2%} <= 2% ({estimate_size(2_800_000, 600, 4) / GIB:.3f}, "
                         f"{estimate_size(2_800_000, 15_000, 4) / GIB:.2f} GiB); ranks {ranks}")
        assert max(errs) <= 0.02
        assert ranks == [600, 15_000, 30_000, 45_000]


def _random_ops(rng, n_ops):
    arrays = {}
    ops = []
    while len(ops) < n_ops:
        if not arrays or (len(arrays) < 4 and rng.random() < 0.02):
            name = f"arr{len(arrays)}"
            shape = (int(rng.integers(1, 40)), int(rng.integers(1, 12)))
            arrays[name] = shape
            ops.append(("create", name, shape, int(rng.choice([4, 8])), str(rng.choice(["row", "col"]))))
            continue
        name = str(rng.choice(sorted(arrays)))
        rows, cols = arrays[name]
        kind = rng.choice(["wcol", "wreg", "rcol", "rreg"], p=[0.45, 0.2, 0.2, 0.15])
        if kind in ("wcol", "rcol"):
            j = int(rng.integers(0, cols))
            ops.append((kind, name, j, rng.standard_normal(rows) * 10 if kind == "wcol" else None))
        else:
            r0 = int(rng.integers(0, rows))
            r1 = int(rng.integers(r0 + 1, rows + 1))
            c0 = int(rng.integers(0, cols))
            c1 = int(rng.integers(c0 + 1, cols + 1))
            data = rng.standard_normal((r1 - r0, c1 - c0)) if kind == "wreg" else None
            ops.append((kind, name, (r0, r1, c0, c1), data))
    return ops, arrays


def _replay(backend, ops, arrays, coalesce):
    handles, coalescers, reads = {}, {}, []

    def drain(name):
        if name in coalescers:
            coalescers[name].flush_now()

    for op in ops:
        kind, name = op[0], op[1]
        if kind == "create":
            handles[name] = backend.create_array(name, *op[2], op[3], op[4])
            if coalesce:
                coalescers[name] = WriteCoalescer(backend, handles[name], CoalescerConfig(5))
        elif kind == "wcol":
            if coalesce:
                coalescers[name].buffered_write_column(op[2], op[3])
            else:
                backend.write_column(handles[name], op[2], op[3])
        elif kind == "rcol":
            reads.append(coalescers[name].read_through(op[2]).tobytes() if coalesce
                         else backend.read_column(handles[name], op[2]).tobytes())
        else:
            drain(name)
            r0, r1, c0, c1 = op[2]
            if kind == "wreg":
                backend.write_region(handles[name], (r0, r1), (c0, c1), op[3])
            else:
                reads.append(backend.read_region(handles[name], (r0, r1), (c0, c1)).tobytes())
    for name in arrays:
        drain(name)
    final = [backend.read_all(handles[name]).tobytes() for name in sorted(arrays)]
    return reads, final


def test_05_backend_equivalence(tmp_path):
    with criterion(5, "backend equivalence", 60) as box:
        rng = np.random.default_rng(505)
        ops, arrays = _random_ops(rng, 1500)
        outcomes = {}
        for coalesce in (False, True):
            for label, spec in _backend_specs(tmp_path / f"ops-{coalesce}").items():
                with make_backend(spec) as be:
                    outcomes[(label, coalesce)] = _replay(be, ops, arrays, coalesce)
        reference = outcomes[("in_memory", False)]
        assert all(out == reference for out in outcomes.values())

        X = np.random.default_rng(506).standard_normal((400, 60))
        blobs = set()
        for coalesce in (None, 7):
            for label, spec in _backend_specs(tmp_path / f"swag-{coalesce}").items():
                with make_backend(spec) as be:
                    post = SwagPosterior(max_columns=16, burn_in=13, backend=be,
                                         coalesce_columns=coalesce).fit(X)
                    blobs.add(post.to_bytes())
        box["detail"] = (f"{len(ops)} ops, {len(reference[0])} reads identical on {len(outcomes)} "
                         f"backend/coalescer combinations; {len(blobs)} distinct posterior checkpoint")
        assert len(blobs) == 1


def _ratio_run(backend, epochs, data):
    spec = ExperimentSpec(backend=BackendConfig.parse(backend), train=TrainConfig(epochs=epochs),
                          swag=SwagConfig(), repetitions=1)
    return run_experiment(spec, data)


def test_06_simulated_ratio(desk_data):
    with criterion(6, "simulated 1:3 ratio and alloc-penalty trend", 60) as box:
        dram = "in_memory:simulate_latency=true"
        flat, trend = [], []
        for epochs in (1, 2, 3):
            base = _ratio_run(dram, epochs, desk_data)
            pmem = _ratio_run("simulated_pmem:latency_multiplier=3,alloc_penalty=0", epochs, desk_data)
            alloc = _ratio_run("simulated_pmem:latency_multiplier=3,alloc_penalty=0.02,label=pmem_alloc",
                               epochs, desk_data)
            rows = {r["backend"]: r for r in summarize([base, pmem, alloc])["rows"]}
            flat.append(rows["fsdax"]["ratio_sim"])
            trend.append(rows["pmem_alloc"]["ratio_sim"])
        box["detail"] = (f"alloc=0 ratios {[round(r, 4) for r in flat]} in [2.9, 3.1]; "
                         f"alloc>0 ratios {[round(r, 3) for r in trend]} strictly decreasing")
        assert all(2.9 <= r <= 3.1 for r in flat)
        assert all(a > b for a, b in zip(trend, trend[1:]))


def test_07_cache_pathology(desk_data):
    with criterion(7, "cache pathology", 60) as box:
        P = MlpModel(PRESETS["desk"]).n_params
        working_set = estimate_size(P, 600, 4)

        def run(backend):
            spec = ExperimentSpec(backend=BackendConfig.parse(backend), train=TrainConfig(epochs=3),
                                  swag=SwagConfig(max_columns=600), repetitions=1)
            return run_experiment(spec, desk_data).records

        def steady(records, field):
            return sum(getattr(r, field) for r in records if r.phase == "PosteriorUpdate" and r.epoch >= 2)

        def epoch_std(records):
            per_epoch = [sum(r.simulated_seconds for r in records if r.epoch == e) for e in (1, 2, 3)]
            return statistics.pstdev(per_epoch)

        small = run(f"tiered:cache_capacity_bytes={working_set // 8},block_size_bytes=4096")
        large = run(f"tiered:cache_capacity_bytes={working_set * 2},block_size_bytes=4096")
        plain = run("simulated_pmem:alloc_penalty=0")
        miss_rate = steady(small, "cache_misses") / (steady(small, "cache_misses") + steady(small, "cache_hits"))
        std_small, std_plain = epoch_std(small), epoch_std(plain)
        box["detail"] = (f"below capacity: steady miss rate {miss_rate:.3f} >= 0.9, per-epoch sim std "
                         f"{std_small:.2e} > uncached {std_plain:.2e}; above capacity: steady misses "
                         f"{steady(large, 'cache_misses')}")
        assert miss_rate >= 0.9
        assert std_small > std_plain
        assert steady(large, "cache_misses") == 0


def test_08_coalescer():
    with criterion(8, "coalescer write reduction", 10) as box:
        P, K, W = MlpModel(PRESETS["desk"]).n_params, 600, 32
        column = np.random.default_rng(8).standard_normal(P)
        cfg = "simulated_pmem:alloc_penalty=0,op_latency=1e-7"
        with make_backend(cfg) as plain, make_backend(cfg) as buffered:
            hp = plain.create_array("d", P, K, 4, "col")
            hb = buffered.create_array("d", P, K, 4, "col")
            co = WriteCoalescer(buffered, hb, CoalescerConfig(W))
            base_ops = buffered.stats().write_ops
            for j in range(K):
                plain.write_column(hp, j, column)
                co.buffered_write_column(j, column)
            co.flush_now()
            region_writes = buffered.stats().write_ops - base_ops
            t_plain, t_buf = plain.stats().simulated_time, buffered.stats().simulated_time
            same = plain.read_all(hp).tobytes() == buffered.read_all(hb).tobytes()
        box["detail"] = (f"{region_writes} region writes == ceil({K}/{W}) = {math.ceil(K / W)}; "
                         f"sim time {t_buf:.3e} < {t_plain:.3e}")
        assert region_writes == co.region_writes == math.ceil(K / W) == 19
        assert t_buf < t_plain
        assert same


def test_09_gradient_check():
    with criterion(9, "gradient check vs finite differences", 30) as box:
        rng = np.random.default_rng(909)
        worst = 0.0
        h = 1e-4
        for _ in range(20):
            sizes = tuple(int(v) for v in rng.integers(2, 8, size=int(rng.integers(2, 5))))
            model = MlpModel(sizes, seed=int(rng.integers(2**31)))
            n = int(rng.integers(1, 9))
            X = rng.uniform(0, 1, (n, sizes[0]))
            y = rng.integers(0, sizes[-1], n)
            g = gradient(model, X, y)
            theta = model.flatten()
            fd = np.empty_like(theta)
            for i in range(theta.size):
                up, down = theta.copy(), theta.copy()
                up[i] += h
                down[i] -= h
                fd[i] = (model.with_params(up).loss_and_grad(X, y)[0]
                         - model.with_params(down).loss_and_grad(X, y)[0]) / (2 * h)
            worst = max(worst, float(np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12)))
        box["detail"] = f"max relative error {worst:.2e} <= 1e-4 over 20 models"
        assert worst <= 1e-4


def _e2e_data():
    directory = os.environ.get("SWAGSTORE_MNIST")
    if directory and Path(directory).is_dir():
        return load_mnist(directory, "train"), load_mnist(directory, "test"), "mnist"
    # held-out draws share the class centres; spread chosen so the task is not trivially solved
    full = synthetic_dataset(0, 12_000, spread=0.6)
    train = Dataset(full.inputs[:6000], full.labels[:6000], 10)
    test = Dataset(full.inputs[6000:], full.labels[6000:], 10)
    return train, test, "synthetic"


def test_10_end_to_end(capsys):
    with criterion(10, "end-to-end desk-scale run", 300) as box:
        train, test, source = _e2e_data()
        model = MlpModel(PRESETS["desk"], seed=0)
        post = SwagPosterior(burn_in=300, max_columns=20).allocate(model.n_params)
        config = TrainConfig(epochs=2, learning_rate=0.05, rng_seed=0)
        for epoch in range(config.epochs):
            sgd_epoch(model, train, config, post.update, epoch)
        assert post.n_models_ == 2 * 600 - 300

        point = point_predict(model, test.inputs)
        bma = bma_predict(model, post, test.inputs, n_samples=30, seed=0)
        for pred in (point, bma):
            assert (pred.probs >= 0).all()
            np.testing.assert_allclose(pred.probs.sum(axis=1), 1.0, atol=1e-12)

        theta = model.flatten()
        frozen = SwagPosterior(max_columns=20, variance_floor=0.0).fit(np.tile(theta, (20, 1)))
        degenerate = bma_predict(model, frozen, test.inputs, n_samples=30, seed=0)
        assert np.array_equal(degenerate.probs, point.probs)

        m_point, m_bma = evaluate(point, test.labels), evaluate(bma, test.labels)
        box["detail"] = (f"{source}: point nll {m_point.nll:.4f} ece {m_point.ece:.4f} acc {m_point.accuracy:.4f}; "
                         f"swag_bma(S=30) nll {m_bma.nll:.4f} ece {m_bma.ece:.4f} acc {m_bma.accuracy:.4f}; "
                         f"zero-covariance BMA == point")


def test_11_checkpoint_restore(tmp_path, desk_data):
    with criterion(11, "checkpoint/restore continuation", 60) as box:
        config = TrainConfig(epochs=3, rng_seed=11)

        def fresh(backend):
            return SwagPosterior(burn_in=300, max_columns=20, backend=backend)

        model = MlpModel(PRESETS["desk"], seed=11)
        post = fresh(make_backend("simulated_pmem")).allocate(model.n_params)
        for epoch in range(3):
            sgd_epoch(model, desk_data, config, post.update, epoch)
        uninterrupted = post.to_bytes()

        model = MlpModel(PRESETS["desk"], seed=11)
        post = fresh(make_backend(f"mapped_file:directory={tmp_path}")).allocate(model.n_params)
        sgd_epoch(model, desk_data, config, post.update, 0)
        (tmp_path / "mid.swag").write_bytes(post.to_bytes())
        np.save(tmp_path / "mid.npy", model.flatten())
        post.backend_.close()
        del model, post

        model = MlpModel(PRESETS["desk"], params=np.load(tmp_path / "mid.npy"))
        with open(tmp_path / "mid.swag", "rb") as fh:
            post = SwagPosterior.restore(fh, backend=make_backend("tiered"))
        for epoch in (1, 2):
            sgd_epoch(model, desk_data, config, post.update, epoch)
        resumed = post.to_bytes()
        box["detail"] = (f"resumed after epoch 1 on a different backend; final checkpoint "
                         f"{len(resumed)} bytes, identical={resumed == uninterrupted}")
        assert resumed == uninterrupted


def _idx(type_code, dims, payload):
    return bytes([0, 0, type_code, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_12_idx_parser():
    with criterion(12, "IDX parser golden headers", None) as box:
        images = parse_idx(_idx(0x08, (60000, 28, 28), bytes(47_040_000)))
        assert images.shape == (60000, 28, 28) and images.dtype == np.uint8
        labels = parse_idx(_idx(0x08, (10000,), bytes(10000)))
        assert labels.shape == (10000,)
        failures = 0
        for bad in (_idx(0x07, (1, 1, 1), b"\0"),                 # unsupported type
                    b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\0",  # bad magic
                    _idx(0x08, (4, 5), bytes(19)),                # truncated payload
                    _idx(0x08, (4, 5), bytes(20))[:9]):           # truncated header
            with pytest.raises(IdxFormatError):
                parse_idx(bad)
            failures += 1
        box["detail"] = "60000x28x28 image and 10000 label headers decoded; 4 malformed streams rejected"
        assert failures == 4

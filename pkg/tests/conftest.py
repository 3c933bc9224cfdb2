import numpy as np
import pytest

from swagstore.store import BackendConfig, make_backend

BACKEND_SPECS = {
    "in_memory": lambda tmp: BackendConfig(kind="in_memory"),
    "mapped_file": lambda tmp: BackendConfig(kind="mapped_file", directory=str(tmp / "mmap")),
    "simulated_pmem": lambda tmp: BackendConfig(kind="simulated_pmem"),
    "tiered_cache": lambda tmp: BackendConfig(kind="tiered_cache", cache_capacity_bytes=8192,
                                              block_size_bytes=1024),
}


@pytest.fixture(params=sorted(BACKEND_SPECS))
def backend(request, tmp_path):
    be = make_backend(BACKEND_SPECS[request.param](tmp_path))
    yield be
    be.close()


@pytest.fixture
def all_backends(tmp_path):
    made = {name: make_backend(spec(tmp_path)) for name, spec in BACKEND_SPECS.items()}
    yield made
    for be in made.values():
        be.close()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


def record_acceptance(number, title, passed, detail):
    _ACCEPTANCE.append((number, title, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")

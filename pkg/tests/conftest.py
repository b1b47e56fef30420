import numpy as np
import pytest

from certopt.lod_two_scale import build_lod_problem
from certopt.problems import benchmark_spec, build_fem_problem


@pytest.fixture(scope="session")
def b1_spec():
    return benchmark_spec("B1", n_h=16)


@pytest.fixture(scope="session")
def b1_fom(b1_spec):
    return build_fem_problem(b1_spec)


@pytest.fixture(scope="session")
def b2_spec():
    return benchmark_spec("B2", n_h=16, resolution=16)


@pytest.fixture(scope="session")
def b2_fom(b2_spec):
    return build_fem_problem(b2_spec)


@pytest.fixture(scope="session")
def lod_spec():
    return benchmark_spec("B2", n_h=32, n_H=4)


@pytest.fixture(scope="session")
def lod_opt(lod_spec):
    return build_lod_problem(lod_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_LINES, [])

    def emit(n: int, ok: bool, detail: str, start: float) -> None:
        import time
        lines.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail} "
                     f"({time.perf_counter() - start:.1f}s)")
    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import os

# single-threaded BLAS keeps float reductions in a fixed order
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import HealthCheck, settings

from cores.graph import Graph, canonical_edges  # noqa: E402

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_graph(rng, n_min=2, n_max=8, dim=3, label=None, p=0.4):
    n = int(rng.integers(n_min, n_max + 1))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.uniform() < p]
    return Graph(
        n,
        canonical_edges(pairs, n),
        rng.normal(size=(n, dim)),
        int(rng.integers(2)) if label is None else label,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset():
    r = np.random.default_rng(7)
    return [random_graph(r, 3, 9, label=i % 2) for i in range(40)]

import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from ophmm.ingest import BinnedDataset, grid_from_cells  # noqa: E402
from ophmm.model import ModelParams  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the end-of-run summary, then assert it."""
    def record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f": {detail}" if detail else "")
        request.config.stash[_ACCEPTANCE].append(line)
        assert ok, line
    return record


@pytest.fixture
def strip3():
    """1 x 3 strip of unit squares."""
    return grid_from_cells([(0, 0), (0, 1), (0, 2)], 1.0, (0.0, 0.0), (1, 3))


def random_params(rng, grid, kappa, C, dt=0.1, zero_frac=0.0):
    """A random model on ``grid``; ``zero_frac`` of off-diagonal P entries zeroed."""
    P = rng.dirichlet(np.ones(kappa), size=kappa)
    if zero_frac:
        mask = (rng.random((kappa, kappa)) < zero_frac) & ~np.eye(kappa, dtype=bool)
        P[mask] = 0.0
        P[np.arange(kappa), np.arange(kappa)] += 1e-3
        P /= P.sum(1, keepdims=True)
    lam = rng.gamma(2.0, 5.0, size=(kappa, C))
    xi = rng.integers(0, grid.M, size=kappa)
    sig = []
    for _ in range(kappa):
        A = rng.normal(size=(2, 2)) * grid.cell_size
        sig.append(A @ A.T + np.eye(2) * grid.cell_size ** 2 * 0.5)
    return ModelParams(P, lam, xi, np.array(sig), grid, dt)


def random_data(rng, params, T, positions=True):
    counts = rng.poisson(params.dt * params.lam.mean(0) * 2, size=(T, params.C))
    pos = rng.integers(0, params.grid.M, size=T) if positions else None
    return BinnedDataset(params.dt, counts, pos, "RUN" if positions else "REST")

import numpy as np
import pytest

from puorl import envs
from puorl.data import build_problem
from puorl.nn_core import Rng

FD_H = 1e-3
FD_RTOL = 1e-4


def fd_check(params, loss_fn, analytic, n_samples=120, seed=0):
    """Central finite differences (five-point stencil) on ``n_samples`` random scalar parameters.

    ``params`` maps names to live float64 arrays that ``loss_fn`` reads.
    Returns (max relative error, number of parameters probed).
    """
    gen = np.random.default_rng(seed)
    keys = sorted(params)
    sizes = np.array([params[k].size for k in keys])
    total = int(sizes.sum())
    picks = gen.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        ki = int(np.searchsorted(offsets, flat, side="right") - 1)
        key = keys[ki]
        arr = params[key].reshape(-1)
        j = flat - offsets[ki]
        old = arr[j]
        vals = []
        for k in (2, 1, -1, -2):
            arr[j] = old + k * FD_H
            vals.append(loss_fn())
        arr[j] = old
        # fourth-order central stencil at step h
        num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * FD_H)
        ana = float(np.asarray(analytic[key]).reshape(-1)[j])
        scale = max(abs(num), abs(ana), 1e-6)
        worst = max(worst, abs(num - ana) / scale)
    return worst, len(picks)


@pytest.fixture(scope="session")
def small_problem():
    return build_problem(envs.default_positive(), envs.SHIFTS["body_mass"](), ("ME", "ME"), 6000, 0.3, 0.05, Rng(11))


@pytest.fixture
def rng():
    return Rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

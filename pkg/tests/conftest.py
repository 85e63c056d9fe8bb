import numpy as np
import pytest

from npkry import unet
from npkry.linalg import SparseMatrix
from npkry.problems import assemble, generate_geometry


def random_spd(n, seed, cond=50.0):
    """Dense SPD matrix with spectrum spread over ``[1, cond]``."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.geomspace(1.0, cond, n)
    A = (Q * lam) @ Q.T
    return SparseMatrix.from_dense(0.5 * (A + A.T), spd=True)


def grid_for(n):
    return {32: (2, 4, 4), 64: (4, 4, 4), 216: (6, 6, 6)}[n]


def tiny_net(grid, widths=(2,), seed=0):
    return unet.init_params(unet.UNetDescriptor(grid=grid, widths=widths), seed=seed)


@pytest.fixture(scope="session")
def small_instance():
    return assemble(generate_geometry(3, 3), 6, eps=0.1)


@pytest.fixture(scope="session")
def tiny_instances():
    return [assemble(generate_geometry(s, 2), 4, eps=0.1) for s in range(4)]


@pytest.fixture(scope="session")
def desk_instance():
    return assemble(generate_geometry(1, 3), 9, eps=0.1)


ACCEPTANCE_LINES = []


def record_criterion(number, name, ok, detail=""):
    """Print and keep one pass/fail line for an acceptance criterion."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}" + (f" ({detail})" if detail else "")
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

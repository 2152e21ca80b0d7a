import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adapttikh.benchmark import data_function
from adapttikh.mesh import Mesh, make_disk_mesh

settings.register_profile(
    "default", max_examples=int(os.environ.get("HYPOTHESIS_EXAMPLES", 25)), deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def square_mesh(n=4):
    """Structured right-triangle mesh of [-1, 1]^2 with ``n`` cells per side."""
    xs = np.linspace(-1.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    tris = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            # hypotenuse opposite the first vertex (refinement edge convention)
            tris.append([b, c, a])
            tris.append([d, a, c])
    boundary = (np.abs(vertices) == 1.0).any(axis=1)
    return Mesh(vertices, np.array(tris), boundary)


@pytest.fixture
def disk():
    return make_disk_mesh(8, 1.0, 1)


@pytest.fixture
def small_disk():
    return make_disk_mesh(6, 1.0, 1)


@pytest.fixture
def ring_data(disk):
    return data_function(disk, 0.5, 1e-2)


# acceptance criteria report: criterion number -> list of (check, passed, detail)
ACCEPTANCE = {}


def record(criterion, check, passed, detail=""):
    ACCEPTANCE.setdefault(criterion, []).append((check, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[n]
        ok = all(p for _, p, _ in checks)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}")
        for check, passed, detail in checks:
            mark = "ok  " if passed else "FAIL"
            terminalreporter.write_line(f"    [{mark}] {check}" + (f" ({detail})" if detail else ""))

import numpy as np
import pytest

from bonsai import kernels


def numeric_grad(f, arr, step=1e-3):
    """Central finite differences of the scalar f() w.r.t. every element of arr (in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    if request.param == "numba" and kernels.NUMBA_KERNELS is None:
        pytest.skip("numba unavailable")
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)

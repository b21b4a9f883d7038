import numpy as np
import pytest


def numeric_grad(f, arr, h=1e-5, index=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (modified in place and restored)."""
    idx = list(np.ndindex(arr.shape)) if index is None else index
    out = np.zeros(len(idx))
    for i, ix in enumerate(idx):
        old = arr[ix]
        arr[ix] = old + h
        fp = f()
        arr[ix] = old - h
        fm = f()
        arr[ix] = old
        out[i] = (fp - fm) / (2 * h)
    return out if index is not None else out.reshape(arr.shape)


def rel_err(a, b, floor=1e-7):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all((diff <= atol) | (diff <= rtol * scale)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


def record_acceptance(number, ok, detail):
    _ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

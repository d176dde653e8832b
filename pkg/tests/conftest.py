from __future__ import annotations

import sys

import numpy as np
import pytest

from impact.numerics import GradTape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f`` w.r.t. every entry of ``x`` (float64)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(fn, arrays: dict[str, np.ndarray], seed: np.ndarray | None = None) -> dict[str, np.ndarray]:
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    with GradTape() as tape:
        out = fn(**leaves)
    grads = tape.backward(seed, output=out)
    return {k: grads.get(k, np.zeros_like(v)) for k, v in arrays.items()}, out


def check_grads(fn, arrays: dict[str, np.ndarray], rtol: float = 1e-6, seed_rng: int = 0) -> None:
    """Compare analytic d(out . w)/d(input) with finite differences for a random weighting w."""
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    out0 = fn(**{k: Tensor(v) for k, v in arrays.items()})
    w = np.random.default_rng(seed_rng).standard_normal(out0.shape)
    grads, _ = analytic_grad(fn, arrays, w)
    for name, arr in arrays.items():
        def scalar(a, name=name):
            kw = {k: Tensor(a if k == name else v) for k, v in arrays.items()}
            return float((fn(**kw).data * w).sum())

        num = numeric_grad(scalar, arr.copy())
        scale = max(1.0, float(np.abs(num).max()))
        err = float(np.abs(num - grads[name]).max()) / scale
        assert err < rtol, f"{name}: max rel err {err}"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in module.VERDICTS:
            terminalreporter.write_line(line)

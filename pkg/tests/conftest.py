import numpy as np
import pytest

from edgeattnet import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. array x, mutated in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(build, inputs, tol, h=1e-5):
    """FD-check gradients of scalar build() against every tensor in `inputs`.

    `build` must construct the graph from the current .data of the inputs
    (so FD perturbations are picked up) and return a scalar Tensor.
    """
    out = build()
    out.backward()

    def f():
        with T.no_grad():
            return build().item()

    worst = 0.0
    for t in inputs:
        num = numeric_grad(f, t.data, h=h)
        assert t.grad is not None, "missing gradient"
        worst = max(worst, max_rel_err(t.grad, num))
    assert worst < tol, f"max relative gradient error {worst:.3e} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)

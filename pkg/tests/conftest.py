import numpy as np
import pytest

from elevmap.autodiff import Tensor


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_tape_gradient(build_loss, x0: np.ndarray, rtol: float = 1e-6, h: float = 1e-6):
    """Compare tape gradients of build_loss(Tensor) against central differences."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = Tensor(x0.copy(), requires_grad=True)
    loss = build_loss(t)
    loss.backward()
    analytic = t.grad

    def value(x):
        return float(build_loss(Tensor(x)).data)

    numeric = numeric_grad(value, x0.copy(), h=h)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / scale
    assert err.max() < rtol, f"gradient mismatch: max rel err {err.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)

import numpy as np
import pytest

from s3moe import diffcore as dc


def finite_difference_grad(fn, x0: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x0 (float64)."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (fn(xp) - fn(xm)) / (2.0 * h)
        it.iternext()
    return grad


def check_grad(fn, x0: np.ndarray, rtol: float = 1e-3, h: float = 1e-2):
    """Compare analytic gradient of fn (built from diffcore ops) vs FD.

    fn maps a Tensor leaf to a scalar Tensor. Relative error is measured
    against the gradient norm. The default step balances central-difference
    truncation against float32 forward-pass roundoff.
    """
    leaf = dc.Tensor(np.asarray(x0, dtype=np.float32), requires_grad=True)
    loss = fn(leaf)
    loss.backward()
    analytic = leaf.grad.astype(np.float64)

    def scalar(x):
        return float(fn(dc.Tensor(x.astype(np.float32))).data)

    numeric = finite_difference_grad(scalar, x0, h=h)
    scale = max(np.linalg.norm(numeric), 1e-4)
    err = np.linalg.norm(analytic - numeric) / scale
    assert err <= rtol, f"gradient mismatch: rel err {err:.2e}"
    return err


@pytest.fixture
def rng():
    return dc.RngState(0)

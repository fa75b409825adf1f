import numpy as np
import pytest

from mcd_ood import autodiff as ad

FD_STEP = 1e-5


def rel_err(a, n, floor=1e-8):
    a, n = np.asarray(a, float), np.asarray(n, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, arrays, step=FD_STEP):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array, perturbing in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + step
            hi = f(*arrays)
            arr[i] = old - step
            lo = f(*arrays)
            arr[i] = old
            g[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def check_grad(build, arrays, tol):
    """``build(*tensors)`` returns a scalar Tensor; compare analytic and numeric gradients.

    Returns the worst elementwise relative error so callers can report it.
    """
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).backward()
    numeric = numeric_grad(lambda *xs: build(*[ad.Tensor(x) for x in xs]).item(), [a.copy() for a in arrays])
    worst = 0.0
    for t, n in zip(tensors, numeric):
        err = rel_err(t.grad, n)
        worst = max(worst, float(err.max()))
        assert err.max() <= tol, f"max relative error {err.max():.3e} > {tol:.0e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

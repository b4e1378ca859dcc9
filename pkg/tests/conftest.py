import numpy as np
import pytest

from fedmm import autodiff as ad
from fedmm.autodiff import Tensor


def central_difference(fn, arrays, h=1e-5):
    """Gradient of scalar fn() w.r.t. each array, by central differences.

    ``fn`` must read the arrays in place; entries are perturbed one at a
    time. Returns a list of gradients matching ``arrays``.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def assert_gradients_close(analytic, numeric, rel=1e-4, abs_floor=1e-7):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    err = np.abs(analytic - numeric)
    ok = err <= rel * denom + abs_floor
    assert np.all(ok), (
        f"gradient mismatch: worst abs err {err.max():.3e}, "
        f"worst rel err {(err / denom).max():.3e}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

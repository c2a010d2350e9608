import numpy as np
import pytest


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def numeric_grad(f, arrays, h=1e-6):
    """Central finite differences of the scalar f() w.r.t. each array in place.

    `f` must recompute its value from the current contents of `arrays`.
    """
    grads = []
    for arr in arrays:
        g = np.zeros(arr.size)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(arr.shape))
    return grads


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

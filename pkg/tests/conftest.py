import numpy as np
import pytest


def rel_err(a, b, floor=1e-5):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_difference_grad(forward, x_data: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar `forward()` w.r.t. x_data (in place)."""
    grad = np.zeros_like(x_data)
    flat = x_data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = forward()
        flat[i] = orig - step
        fm = forward()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def finite_difference_grad_sampled(forward, x_data: np.ndarray, indices, step: float = 1e-5):
    """Central differences at a subset of flat indices; returns {index: value}."""
    flat = x_data.ravel()
    out = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        fp = forward()
        flat[i] = orig - step
        fm = forward()
        flat[i] = orig
        out[int(i)] = (fp - fm) / (2.0 * step)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

"""Shared oracles for the test suite.

The finite-difference oracle here is the independent reference every
gradient in the package is checked against; it never calls backward().
"""

import numpy as np


def fd_gradient(loss_fn, arrays: dict, name: str, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss wrt arrays[name].

    ``loss_fn`` maps the dict of plain ndarrays to a python float and must
    be deterministic (re-seed any randomness inside it).
    """
    base = arrays[name]
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = {k: v.copy() for k, v in arrays.items()}
        bumped[name].reshape(-1)[i] += h
        hi = loss_fn(bumped)
        bumped[name].reshape(-1)[i] -= 2 * h
        lo = loss_fn(bumped)
        flat[i] = (hi - lo) / (2 * h)
    return grad


def rel_err(a, b, floor: float = 1e-6) -> float:
    """Worst-case relative error between two arrays with a magnitude floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))

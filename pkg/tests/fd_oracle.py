"""Central finite-difference oracle used by the gradient tests.

Kept independent of the autograd engine's backward rules: it only calls
forward functions and perturbs raw numpy buffers.
"""

import numpy as np


def fd_gradient(fn, arr, step=1e-6):
    """Central-difference gradient of scalar fn(array) w.r.t. every entry."""
    arr = np.asarray(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(arr)
        flat[i] = orig - step
        lo = fn(arr)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def rel_error(a, b, atol=1e-7):
    """Norm-relative error; zero when both sides vanish below FD noise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a.reshape(-1))
    nb = np.linalg.norm(b.reshape(-1))
    if max(na, nb) < atol:
        return 0.0
    return float(np.linalg.norm((a - b).reshape(-1)) / max(na, nb))

"""Central finite-difference gradient verification.

The finite-difference side never touches the tape: it re-runs the forward
function with perturbed parameter values, so it is an independent oracle
for the reverse-mode gradients.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


def fd_gradients(f, params: list[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences (f(p+h) - f(p-h)) / 2h for every parameter entry."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(f, params: list[Tensor], h: float = 1e-5) -> float:
    """Return the max relative error between tape and finite-difference grads.

    Relative error is normalized by the largest finite-difference magnitude
    across all checked parameters (plus a tiny floor), which keeps the
    metric stable when individual entries are near zero.
    """
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    ad = [np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
          for p in params]
    fd = fd_gradients(f, params, h=h)
    scale = max(float(np.max(np.abs(g))) for g in fd) if fd else 0.0
    scale = max(scale, 1e-8)
    worst = 0.0
    for ga, gf in zip(ad, fd):
        worst = max(worst, float(np.max(np.abs(ga - gf))) / scale)
    return worst

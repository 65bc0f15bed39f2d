"""Shared test helpers: hypothesis profile and finite-difference oracles."""
from __future__ import annotations

import numpy as np
from hypothesis import settings

settings.register_profile("suite", deadline=None, derandomize=True,
                          max_examples=60)
settings.load_profile("suite")


def central_fd(fn, arrays, h=1e-5):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. arrays.

    ``fn`` must read the current contents of ``arrays`` (in-place perturbation).
    Returns a list of gradients aligned with ``arrays``.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
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


def rel_err(a, b, floor=1e-8):
    """Max relative error between two gradient lists."""
    worst = 0.0
    for x, y in zip(a, b):
        denom = np.maximum(np.abs(x), np.maximum(np.abs(y), floor))
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst

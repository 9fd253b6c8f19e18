from __future__ import annotations

import numpy as np

from .errors import DimensionError


def sigma_max(m, tol=1e-6, max_iter=1000):
    """Largest singular value of ``m`` by power iteration on ``m.T @ m``.

    Iterates until the estimate changes by less than ``tol`` relative to
    itself. A zero matrix yields 0.
    """
    m = np.asarray(getattr(m, "data", m), dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"sigma_max expects a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("sigma_max needs a finite matrix")
    if m.size == 0 or not np.any(m):
        return 0.0
    gram = m.T @ m
    # fixed start vector: results depend only on the matrix
    v = np.random.default_rng(0x5EED).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector landed in the null space; restart on a basis vector
            v = np.zeros_like(v)
            v[np.argmax(np.abs(gram).sum(axis=0))] = 1.0
            continue
        v = w / norm
        new = float(np.sqrt(v @ gram @ v))
        if abs(new - sigma) <= tol * new:
            return new
        sigma = new
    return sigma

"""Projecting conflicting gradients across tasks (gradient surgery)."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import LengthMismatch


def project_pair(gi: np.ndarray, gj: np.ndarray) -> np.ndarray:
    """Remove from ``gi`` its component along ``gj`` if the two conflict."""
    dot = float(np.dot(gi, gj))
    norm2 = float(np.dot(gj, gj))
    if dot < 0.0 and norm2 > 0.0:
        return gi - (dot / norm2) * gj
    return gi


def project_conflicts(grads: Sequence[np.ndarray], rng_seed=None, return_projected: bool = False):
    """Combine per-task flat gradients over the shared parameters.

    For every task the other tasks' *original* gradients are visited in a
    seeded random order; each conflicting one (negative dot product) is
    projected out. The result is the sum of the adjusted gradients.
    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(grads) < 2:
        raise ValueError("gradient surgery needs at least two tasks")
    if len({g.shape for g in grads}) != 1 or grads[0].ndim != 1:
        raise LengthMismatch(f"task gradients have shapes {[g.shape for g in grads]}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    projected = []
    for i, g in enumerate(grads):
        others = [j for j in range(len(grads)) if j != i]
        for j in rng.permutation(others):
            g = project_pair(g, grads[j])
        projected.append(g)
    total = np.sum(projected, axis=0)
    return (total, projected) if return_projected else total

"""Gauss-Legendre rules mapped onto the atoms of a partition."""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the ``n``-point rule on ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def atom_rule(edges, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite ``n``-point Gauss rule on consecutive intervals ``edges``.

    Returns flat ``(points, weights)``; points of atom ``i`` occupy the slice
    ``[i * n, (i + 1) * n)``.
    """
    edges = np.asarray(edges, dtype=float)
    x, w = gauss_legendre(n)
    h = np.diff(edges)
    pts = edges[:-1, None] + h[:, None] * x[None, :]
    wts = h[:, None] * w[None, :]
    return pts.ravel(), wts.ravel()


def midpoint_rule(edges, sub: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoints and lengths of ``sub`` equal cells inside each interval."""
    edges = np.asarray(edges, dtype=float)
    h = np.diff(edges) / sub
    offs = (np.arange(sub) + 0.5)
    pts = edges[:-1, None] + h[:, None] * offs[None, :]
    wts = np.repeat(h, sub)
    return pts.ravel(), wts

"""B-spline Gram matrices, their (principal-submatrix) inverses and decay fits."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .bspline import BSplineBasis, Spline

RESIDUAL_TOL = 1e-8
SIGN_TOL = 1e-10


class ConditioningError(LinAlgError):
    def __init__(self, msg, condition_number):
        super().__init__(msg)
        self.condition_number = condition_number


class PivotError(ZeroDivisionError):
    pass


@dataclass
class GramMatrix:
    basis: BSplineBasis

    @property
    def k(self):
        return self.basis.k

    @property
    def n(self):
        return self.basis.dim

    @property
    def banded(self):
        return self.basis.gram_banded

    @property
    def dense(self):
        return self.basis.gram


def gram_matrix(basis: BSplineBasis) -> GramMatrix:
    return GramMatrix(basis)


@dataclass
class DualSystem:
    """Inverse of the principal Gram submatrix on ``subset``.

    ``coeffs[a, b]`` is the coefficient of ``N_{subset[b]}`` in the dual
    function of ``N_{subset[a]}``.
    """

    coeffs: np.ndarray
    subset: np.ndarray
    residual: float = 0.0
    C_fit: float | None = None
    q_fit: float | None = None

    def dual_function(self, basis: BSplineBasis, i: int) -> Spline:
        a = int(np.searchsorted(self.subset, i))
        if a >= self.subset.size or self.subset[a] != i:
            raise IndexError(f"index {i} not in subset")
        c = np.zeros(basis.dim)
        c[self.subset] = self.coeffs[a]
        return Spline(basis, c)

    def checkerboard_violation(self) -> float:
        """Largest negative part of ``(-1)^{a+b} coeffs[a, b]``.

        The parity is that of positions inside the subset: ``G(m, m)`` is
        itself totally positive, so its inverse alternates in its own rows
        and columns. Original B-spline indices give the wrong sign as soon as
        ``m`` has a gap.
        """
        pos = np.arange(self.subset.size)
        s = (-1.0) ** (pos[:, None] + pos[None, :])
        return float(max(0.0, -np.min(s * self.coeffs)))


def dual_coefficients(G: GramMatrix | np.ndarray, subset=None, tol: float = RESIDUAL_TOL) -> DualSystem:
    """Inverse of ``G(m, m)`` for the sorted index subset ``m`` (all indices by default)."""
    dense = G.dense if isinstance(G, GramMatrix) else np.asarray(G, dtype=float)
    n = dense.shape[0]
    m = np.arange(n) if subset is None else np.unique(np.asarray(subset, dtype=int))
    if m.size == 0:
        raise ValueError("subset must be nonempty")
    if m[0] < 0 or m[-1] >= n:
        raise IndexError("subset index out of range")
    sub = dense[np.ix_(m, m)]
    try:
        fac = cho_factor(sub)
        inv = cho_solve(fac, np.eye(m.size))
    except LinAlgError:
        raise ConditioningError("principal submatrix is not numerically positive definite",
                                np.linalg.cond(sub)) from None
    inv = 0.5 * (inv + inv.T)
    res = float(np.max(np.abs(inv @ sub - np.eye(m.size))))
    if not res <= tol:
        raise ConditioningError(f"inverse residual {res:.2e} exceeds {tol:.0e}", np.linalg.cond(sub))
    return DualSystem(inv, m, res)


def inverse_delete_update(D_inv: np.ndarray, ell: int, pivot_tol: float = 1e-300) -> np.ndarray:
    """Inverse of ``D`` with row and column ``ell`` removed, computed from ``D^{-1}``."""
    D_inv = np.asarray(D_inv, dtype=float)
    piv = D_inv[ell, ell]
    if not abs(piv) > pivot_tol:
        raise PivotError(f"pivot D^-1({ell},{ell}) = {piv} is zero")
    e = D_inv - np.outer(D_inv[:, ell], D_inv[ell, :]) / piv
    keep = np.delete(np.arange(D_inv.shape[0]), ell)
    return e[np.ix_(keep, keep)]


@dataclass
class TPReport:
    min_minor: float
    worst_rows: tuple
    worst_cols: tuple
    n_minors: int
    passed: bool


def certify_total_positivity(M: np.ndarray, max_order: int | None = None,
                             tol: float = SIGN_TOL, max_n: int = 12) -> TPReport:
    """Enumerate every minor up to ``max_order`` and report the smallest."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if n > max_n or M.shape[1] > max_n:
        raise ValueError(f"matrix too large for exhaustive minor enumeration (n={n} > {max_n})")
    max_order = min(M.shape) if max_order is None else min(max_order, *M.shape)
    best, worst, count = np.inf, ((), ()), 0
    for r in range(1, max_order + 1):
        rows = np.array(list(combinations(range(M.shape[0]), r)))
        cols = np.array(list(combinations(range(M.shape[1]), r)))
        for chunk in np.array_split(rows, max(1, len(rows) // 64)):
            sub = M[chunk[:, None, :, None], cols[None, :, None, :]]
            dets = np.linalg.det(sub)
            count += dets.size
            idx = np.unravel_index(np.argmin(dets), dets.shape)
            if dets[idx] < best:
                best = float(dets[idx])
                worst = (tuple(chunk[idx[0]]), tuple(cols[idx[1]]))
    return TPReport(best, worst[0], worst[1], count, best >= -tol)


def envelope_decay_fit(distance, value, near: int = 1, min_tail: int = 3,
                       floor: float = 1e-11) -> tuple[float, float]:
    """Fit ``value <= C q^max(0, distance - near)`` to the upper envelope of the data.

    The envelope is the max of ``value`` at each distance. ``log q`` is the
    least-squares slope of the log-envelope over distances ``>= near`` whose
    envelope exceeds ``floor`` times its maximum (smaller entries are rounding
    noise). ``C`` is then raised until the curve dominates every envelope
    point. With fewer than ``min_tail`` surviving distances beyond ``near``
    there is no geometric regime to measure; everything is absorbed into
    ``C`` and ``q = 0``.
    """
    distance = np.asarray(distance).ravel().astype(int)
    value = np.abs(np.asarray(value, dtype=float).ravel())
    if distance.size == 0:
        raise ValueError("no data to fit")
    ds = np.unique(distance)
    env = np.array([value[distance == d].max() for d in ds])
    top = env.max()
    if top == 0:
        return 0.0, 0.0
    ok = env > floor * top
    tail = ok & (ds >= near)
    if np.count_nonzero(ok & (ds > near)) < min_tail:
        return float(env[ok].max()), 0.0
    x, y = ds[tail], np.log(env[tail])
    slope = float(np.polyfit(x, y, 1)[0]) if x.size > 1 else 0.0
    q = float(np.exp(slope))
    C = float(np.max(env[ok] / q ** np.maximum(ds[ok] - near, 0)))
    return C, q


def conv_lengths(basis: BSplineBasis, rows, cols) -> np.ndarray:
    """``|conv(F_i, F_j)|`` for index arrays ``rows``, ``cols``."""
    e = basis.partition.edges
    b = basis.support_bounds
    rows, cols = np.asarray(rows), np.asarray(cols)
    lo = np.minimum(e[b[rows, 0]][:, None], e[b[cols, 0]][None, :])
    hi = np.maximum(e[b[rows, 1] + 1][:, None], e[b[cols, 1] + 1][None, :])
    return hi - lo


def fit_decay(ds: DualSystem, basis: BSplineBasis) -> tuple[float, float]:
    """Envelope fit of ``|a_ij| |conv(F_i, F_j)| <= C q^{|i-j|}``; stored on ``ds``."""
    m = ds.subset
    scaled = np.abs(ds.coeffs) * conv_lengths(basis, m, m)
    dist = np.abs(m[:, None] - m[None, :])
    C, q = envelope_decay_fit(dist, scaled)
    ds.C_fit, ds.q_fit = C, q
    return C, q

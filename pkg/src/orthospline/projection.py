"""Orthogonal projections onto tensor spline spaces and a decaying maximal function."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence
import warnings

import numpy as np

from .bspline import BSplineBasis, TensorSpline, l1_norms, mode_product
from .partition import TensorFiltration
from .quadrature import atom_rule
from .tensor_ortho import OrthoSystem, QuadratureWarning, _sampler


def _solve_along(basis: BSplineBasis, tensor: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(tensor, axis, 0)
    out = basis.solve_gram(moved.reshape(moved.shape[0], -1)).reshape(moved.shape)
    return np.moveaxis(out, 0, axis)


def tensor_moments(f, bases: Sequence[BSplineBasis], n_quad: int | None = None,
                   check: bool = True, tol: float = 1e-8) -> np.ndarray:
    """``<f, N_{i_1} x ... x N_{i_d}>`` for a tensor spline or a point function ``f``.

    Tensor splines are integrated exactly on the common refinement. Point
    functions use ``n_quad`` Gauss nodes per atom; with ``check`` the rule is
    repeated at twice the nodes and a :class:`QuadratureWarning` is issued
    when the two disagree by more than ``tol``.
    """
    if isinstance(f, TensorSpline):
        edges = [np.union1d(b.partition.edges, g.partition.edges) for b, g in zip(bases, f.bases)]
        nq = [-(-(b.k + g.k - 1) // 2) for b, g in zip(bases, f.bases)]
        return _moments_on(lambda axes: f.on_grid(axes), bases, edges, nq)
    values = _sampler(f)
    edges = [b.partition.edges for b in bases]
    nq = [n_quad or (b.k + 4) for b in bases]
    out = _moments_on(values, bases, edges, nq)
    if check:
        ref = _moments_on(values, bases, edges, [2 * q for q in nq])
        err = float(np.max(np.abs(ref - out)))
        if err > tol:
            warnings.warn(f"quadrature error estimate {err:.2e} exceeds {tol:.0e}",
                          QuadratureWarning, stacklevel=3)
    return out


def _moments_on(values: Callable, bases, edges, nq) -> np.ndarray:
    rules = [atom_rule(e, q) for e, q in zip(edges, nq)]
    t = values([r[0] for r in rules])
    for j, (b, (pts, wts)) in enumerate(zip(bases, rules)):
        W = b.collocation(pts, sparse=True).multiply(wts[:, None]).T
        t = mode_product(t, W.tocsr(), j)
    return t


@dataclass
class Projector:
    """Orthogonal projection ``P_n`` onto ``S_k(F_n)``."""

    filtration: TensorFiltration
    k: tuple[int, ...]
    n: int

    def __post_init__(self):
        self.k = tuple(int(x) for x in self.k)
        self.bases = tuple(BSplineBasis(p, kk) for p, kk in zip(self.filtration.partitions(self.n), self.k))

    def coefficients_from_moments(self, moments: np.ndarray) -> np.ndarray:
        c = moments
        for j, b in enumerate(self.bases):
            c = _solve_along(b, c, j)
        return c

    def __call__(self, f, **kw) -> TensorSpline:
        return TensorSpline(self.bases, self.coefficients_from_moments(tensor_moments(f, self.bases, **kw)))


def project(filtration: TensorFiltration, k: Sequence[int], n: int, f, **kw) -> TensorSpline:
    return Projector(filtration, tuple(k), n)(f, **kw)


def project_partial(system: OrthoSystem, n: int, m: int, f, **kw) -> TensorSpline:
    """``P_{n-1} f + sum_{mu <= m} <f, f_{n,mu}> f_{n,mu}`` on ``F_n``."""
    blk = system.blocks[n]
    if not 0 <= m <= blk.size:
        raise IndexError(f"partial index {m} outside 0..{blk.size}")
    bases = system.bases(n)
    out = np.zeros(tuple(b.dim for b in bases))
    if n > 0:
        prev = project(system.filtration, system.k, n - 1, f, **kw)
        out += prev.refine_to(bases).coeffs
    if m > 0:
        c = np.zeros(blk.size)
        c[:m] = system.block_expand(f, n)[:m]
        t = blk.to_tensor(c)
        for j in range(blk.dim):
            t = mode_product(t, blk.mats[j].T, j)
        out += t
    return TensorSpline(bases, out)


def kernel_norm_1d(basis: BSplineBasis, extra: int = 2, rtol: float = 1e-2, iters: int = 30) -> float:
    """``sup_x int |K(x, y)| dy`` for the univariate projection kernel.

    ``y -> K(x, y)`` is the spline with coefficients ``G^{-1} N(x)``; its
    ``L^1`` norm is computed exactly. The sup is first taken over ``k +
    extra`` Gauss points per atom together with the breakpoints; atoms whose
    value comes within ``rtol`` of the best are then searched by golden
    sections, all at once, since ``x -> int |K(x, y)| dy`` is not
    polynomial. For ``k = 1`` the value is constant on atoms and the search
    is skipped.
    """
    def phi(x):
        C = basis.solve_gram(basis.collocation(np.atleast_1d(x)).T).T
        return l1_norms(basis, C)

    e = basis.partition.edges
    n = basis.k + extra
    pts, _ = atom_rule(e, n)
    vals = phi(pts)
    best = max(float(vals.max()), float(phi(e).max()))
    cand = np.nonzero(vals.reshape(-1, n).max(axis=1) >= (1 - rtol) * best)[0]
    if basis.k == 1 or cand.size == 0:
        return best
    g = (np.sqrt(5.0) - 1) / 2
    a, b = e[cand], e[cand + 1]
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = phi(c), phi(d)
    for _ in range(iters):
        left = fc > fd
        a, b = np.where(left, a, c), np.where(left, d, b)
        c, d, fc, fd = np.where(left, b - g * (b - a), d), np.where(left, c, a + g * (b - a)), \
            np.where(left, 0.0, fd), np.where(left, fc, 0.0)
        x = np.where(left, c, d)
        fx = phi(x)
        fc, fd = np.where(left, fx, fc), np.where(left, fd, fx)
    return max(best, float(fc.max()), float(fd.max()))


def operator_norms(filtration: TensorFiltration, k: Sequence[int], n: int) -> tuple[float, float]:
    """``(||P_n||_{1 -> 1}, ||P_n||_{inf -> inf})``.

    The kernel is a product of univariate kernels, so both norms are products
    of univariate ones; the kernel is symmetric, so the two coincide.
    """
    val = 1.0
    for p, kk in zip(filtration.partitions(n), k):
        val *= kernel_norm_1d(BSplineBasis(p, kk))
    return val, val


class MaximalEvaluator:
    """``M f(x) = sup_n sum_A rho^{|d_n(A, A_n(x))|_1} / |conv(A, A_n(x))| int_A |f|``.

    The weight factors over directions, so each step costs one small matrix
    product per direction. ``M f`` depends on ``x`` only through its atom in
    the finest partition, where its values are returned.
    """

    def __init__(self, filtration: TensorFiltration, rho: float, steps: Sequence[int] | None = None):
        if not 0 <= rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        self.filtration = filtration
        self.rho = float(rho)
        self.steps = list(range(filtration.n_steps + 1)) if steps is None else list(steps)
        self.last = max(self.steps)
        self.fine = filtration.partitions(self.last)

    @property
    def cell_volumes(self) -> np.ndarray:
        out = np.ones(())
        for p in self.fine:
            out = np.multiply.outer(out, p.lengths)
        return out

    def cell_integrals(self, f, sub: int = 4, n_quad: int = 4) -> np.ndarray:
        """``int_A |f|`` over finest atoms by composite Gauss on ``sub`` cells per atom."""
        if isinstance(f, np.ndarray):
            if f.shape != tuple(p.n_atoms for p in self.fine):
                raise ValueError("cell integral array does not match the finest partition")
            return f
        rules = []
        for p in self.fine:
            e = p.edges
            sub_e = np.concatenate([(e[:-1, None] + np.diff(e)[:, None] * np.arange(sub)[None, :] / sub).ravel(),
                                    e[-1:]])
            rules.append(atom_rule(sub_e, n_quad))
        axes = [r[0] for r in rules]
        vals = np.abs(f.on_grid(axes) if isinstance(f, TensorSpline) else _sampler(f)(axes))
        for j, (_, w) in enumerate(rules):
            vals = np.moveaxis(vals, j, -1)
            vals = (vals * w).reshape(vals.shape[:-1] + (-1, sub * n_quad)).sum(-1)
            vals = np.moveaxis(vals, -1, j)
        return vals

    def _maps(self, n: int):
        out = []
        for p, fine in zip(self.filtration.partitions(n), self.fine):
            out.append(np.searchsorted(p.edges, fine.edges[:-1], side="right") - 1)
        return out

    def step_sums(self, cells: np.ndarray, n: int) -> np.ndarray:
        """The step-``n`` sum for every atom of ``F_n``."""
        t = cells
        maps = self._maps(n)
        for j, (p, mp) in enumerate(zip(self.filtration.partitions(n), maps)):
            starts = np.searchsorted(mp, np.arange(p.n_atoms))
            t = np.add.reduceat(t, starts, axis=j)
            e = p.edges
            i = np.arange(p.n_atoms)
            conv = np.maximum(e[i + 1][:, None], e[i + 1][None, :]) - np.minimum(e[i][:, None], e[i][None, :])
            W = self.rho ** np.abs(i[:, None] - i[None, :]) / conv
            t = mode_product(t, W, j)
        return t

    def evaluate(self, f, **kw) -> np.ndarray:
        """``M f`` on the atoms of the finest partition."""
        cells = self.cell_integrals(f, **kw)
        out = np.zeros(cells.shape)
        for n in self.steps:
            s = self.step_sums(cells, n)
            np.maximum(out, s[np.ix_(*self._maps(n))], out=out)
        return out

    def at(self, values: np.ndarray, points) -> np.ndarray:
        points = np.atleast_2d(points)
        idx = tuple(p.atom_of(points[:, j]) for j, p in enumerate(self.fine))
        return values[idx]

    def on_grid(self, values: np.ndarray, axes) -> np.ndarray:
        idx = [p.atom_of(np.asarray(x)) for p, x in zip(self.fine, axes)]
        return values[np.ix_(*idx)]

    def superlevel_measure(self, values: np.ndarray, lam: float) -> float:
        return float(self.cell_volumes[values > lam].sum())


def maximal_function(f, evaluator: MaximalEvaluator, **kw) -> np.ndarray:
    return evaluator.evaluate(f, **kw)


def _atom_grid(partitions, npts: int):
    return [atom_rule(p.edges, npts)[0] for p in partitions]


def check_domination(system: OrthoSystem, n: int, m: int, f, evaluator: MaximalEvaluator,
                     npts: int = 4) -> dict:
    """``sup |P_{n,m} f| / M f`` over a per-atom Gauss grid of the evaluator's finest partition."""
    P = project_partial(system, n, m, f)
    axes = _atom_grid(evaluator.fine, npts)
    Mf = evaluator.on_grid(evaluator.evaluate(f), axes)
    Pf = np.abs(P.on_grid(axes))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(Pf > 0, Pf / Mf, 0.0)
    ratio = float(np.max(r))
    if not np.isfinite(ratio):
        raise FloatingPointError("maximal function vanishes where the projection does not")
    return {"ratio": ratio, "n": n, "m": m, "rho": evaluator.rho}


def kernel_decay_ratio(filtration: TensorFiltration, k: Sequence[int], n: int, f, q: float,
                       npts: int = 4) -> float:
    """``sup |P_n f| / sum_A q^{|d_n|_1} / |conv| int_A |f|`` at step ``n``."""
    ev = MaximalEvaluator(filtration, q, steps=[n])
    P = project(filtration, k, n, f)
    axes = _atom_grid(ev.fine, npts)
    bound = ev.on_grid(ev.evaluate(f), axes)
    return float(np.max(np.abs(P.on_grid(axes)) / bound))

"""Clamped B-spline bases on interval partitions.

A basis of order ``k`` on a partition with ``m`` atoms uses the knot vector
with both endpoints repeated ``k`` times and every breakpoint once, so the
spline space is ``C^{k-2}`` and has dimension ``m + k - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded

from .partition import Partition1D
from .quadrature import atom_rule, gauss_legendre


class IncompatibleBasesError(ValueError):
    pass


def clamped_knots(partition: Partition1D, k: int) -> np.ndarray:
    return np.concatenate([np.full(k, partition.left), partition.breakpoints,
                           np.full(k, partition.right)])


def _basis_funs(t: np.ndarray, k: int, mu: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Nonzero B-splines ``N_{mu-k+1}, ..., N_mu`` at ``x`` (Cox-de Boor triangle)."""
    m = x.shape[0]
    vals = np.ones((m, 1))
    left = np.empty((m, k))
    right = np.empty((m, k))
    for j in range(1, k):
        left[:, j] = x - t[mu + 1 - j]
        right[:, j] = t[mu + j] - x
        new = np.empty((m, j + 1))
        saved = np.zeros(m)
        for r in range(j):
            temp = vals[:, r] / (right[:, r + 1] + left[:, j - r])
            new[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        new[:, j] = saved
        vals = new
    return vals


class BSplineBasis:
    """B-spline basis ``(N_i)`` of order ``k`` on ``partition``; ``sum_i N_i = 1``."""

    def __init__(self, partition: Partition1D, k: int):
        if k < 1:
            raise ValueError("order must be a positive integer")
        self.partition = partition
        self.k = int(k)
        self.knots = clamped_knots(partition, self.k)
        self.dim = partition.n_atoms + self.k - 1

    def __repr__(self):
        return f"BSplineBasis(k={self.k}, atoms={self.partition.n_atoms})"

    def __eq__(self, other):
        return (isinstance(other, BSplineBasis) and self.k == other.k
                and self.partition == other.partition)

    def __hash__(self):
        return hash((self.k, self.partition))

    # evaluation --------------------------------------------------------

    def nonzero(self, x):
        """Span indices and the ``k`` nonzero basis values at each point.

        Returns ``(first, vals)`` where ``vals[p, a] = N_{first[p] + a}(x[p])``.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        atom = self.partition.atom_of(x)
        atom = np.atleast_1d(atom)
        mu = atom + self.k - 1
        return mu - self.k + 1, _basis_funs(self.knots, self.k, mu, x)

    def collocation(self, x, sparse: bool = False):
        """Matrix ``C[p, i] = N_i(x[p])``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        first, vals = self.nonzero(x)
        rows = np.repeat(np.arange(x.size), self.k)
        cols = (first[:, None] + np.arange(self.k)[None, :]).ravel()
        mat = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(x.size, self.dim))
        return mat if sparse else mat.toarray()

    def eval(self, i: int, x):
        if not 0 <= i < self.dim:
            raise IndexError(f"basis index {i} out of range 0..{self.dim - 1}")
        first, vals = self.nonzero(x)
        a = i - first
        inside = (a >= 0) & (a < self.k)
        out = np.zeros(vals.shape[0])
        out[inside] = vals[inside, a[inside]]
        return out if np.ndim(x) else float(out[0])

    # geometry ----------------------------------------------------------

    def support_atoms(self, i: int) -> tuple[int, int]:
        """Atom index range ``[lo, hi]`` (inclusive) of ``supp N_i``."""
        if not 0 <= i < self.dim:
            raise IndexError(f"basis index {i} out of range 0..{self.dim - 1}")
        lo = max(i - self.k + 1, 0)
        hi = min(i, self.partition.n_atoms - 1)
        return lo, hi

    def support(self, i: int) -> tuple[tuple[float, float], int]:
        """``(F_i, K_i)``: support interval and its leftmost atom of maximal length."""
        lo, hi = self.support_atoms(i)
        e = self.partition.edges
        lens = self.partition.lengths[lo:hi + 1]
        return (float(e[lo]), float(e[hi + 1])), lo + int(np.argmax(lens))

    @cached_property
    def support_bounds(self) -> np.ndarray:
        """``(dim, 2)`` array of support atom ranges."""
        i = np.arange(self.dim)
        return np.stack([np.maximum(i - self.k + 1, 0),
                         np.minimum(i, self.partition.n_atoms - 1)], axis=1)

    @cached_property
    def support_lengths(self) -> np.ndarray:
        e = self.partition.edges
        b = self.support_bounds
        return e[b[:, 1] + 1] - e[b[:, 0]]

    @cached_property
    def largest_atoms(self) -> np.ndarray:
        return np.array([self.support(i)[1] for i in range(self.dim)])

    # Gram matrix -------------------------------------------------------

    @cached_property
    def gram_banded(self) -> np.ndarray:
        """Upper banded storage ``ab[k-1+i-j, j] = <N_i, N_j>`` for ``i <= j``."""
        k = self.k
        pts, wts = atom_rule(self.partition.edges, k)
        first, vals = self.nonzero(pts)
        ab = np.zeros((k, self.dim))
        for a in range(k):
            for b in range(a, k):
                # row i = first + a, col j = first + b, i <= j
                np.add.at(ab[k - 1 + a - b], first + b, wts * vals[:, a] * vals[:, b])
        return ab

    @cached_property
    def gram(self) -> np.ndarray:
        ab = self.gram_banded
        k = self.k
        g = np.zeros((self.dim, self.dim))
        for off in range(k):
            d = ab[k - 1 - off, off:]
            idx = np.arange(self.dim - off)
            g[idx, idx + off] = d
            g[idx + off, idx] = d
        return g

    @cached_property
    def gram_cholesky(self) -> np.ndarray:
        return cholesky_banded(self.gram_banded)

    def solve_gram(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``G x = rhs`` (along axis 0) with the banded Cholesky factor."""
        return cho_solve_banded((self.gram_cholesky, False), rhs)

    def moments(self, pts, wts, values) -> np.ndarray:
        """``int N_i f`` from a quadrature rule; ``values`` may carry trailing axes."""
        c = self.collocation(pts, sparse=True)
        values = np.asarray(values, dtype=float)
        w = np.asarray(wts).reshape((-1,) + (1,) * (values.ndim - 1))
        return c.T @ (w * values)

    # refinement --------------------------------------------------------

    def insert_knot(self, x: float) -> tuple["BSplineBasis", sp.csr_matrix, int]:
        """Boehm insertion of the breakpoint ``x``.

        Returns ``(fine, T, mu)`` with ``c_fine = T @ c_coarse`` and ``mu`` the
        coarse knot span containing ``x``.
        """
        p = self.partition
        atom = p.atom_of(x)
        fine = BSplineBasis(p.refine(atom, x), self.k)
        k, t = self.k, self.knots
        mu = atom + k - 1
        rows, cols, data = [], [], []
        for i in range(self.dim + 1):
            if i <= mu - k + 1:
                rows.append(i); cols.append(i); data.append(1.0)
            elif i <= mu:
                alpha = (x - t[i]) / (t[i + k - 1] - t[i])
                rows += [i, i]; cols += [i, i - 1]; data += [alpha, 1.0 - alpha]
            else:
                rows.append(i); cols.append(i - 1); data.append(1.0)
        mat = sp.csr_matrix((data, (rows, cols)), shape=(self.dim + 1, self.dim))
        return fine, mat, mu

    def refinement_matrix(self, fine: "BSplineBasis") -> sp.csr_matrix:
        """Matrix mapping coefficients on ``self`` to coefficients on ``fine``."""
        if fine.k != self.k or not fine.partition.is_refinement_of(self.partition):
            raise IncompatibleBasesError("target basis is not a refinement")
        mat = sp.identity(self.dim, format="csr")
        cur = self
        new = sorted(set(fine.partition.breakpoints) - set(self.partition.breakpoints))
        for x in new:
            cur, t, _ = cur.insert_knot(x)
            mat = t @ mat
        return mat.tocsr()


@dataclass
class Spline:
    basis: BSplineBasis
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.basis.dim,):
            raise ValueError(f"expected {self.basis.dim} coefficients")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coefficients must be finite")

    def __call__(self, x):
        first, vals = self.basis.nonzero(x)
        idx = first[:, None] + np.arange(self.basis.k)[None, :]
        out = np.sum(vals * self.coeffs[idx], axis=1)
        return out if np.ndim(x) else float(out[0])

    def refine_to(self, fine: BSplineBasis) -> "Spline":
        return Spline(fine, self.basis.refinement_matrix(fine) @ self.coeffs)

    def atom_polynomials(self) -> list[np.polynomial.Polynomial]:
        """Exact polynomial pieces, one per atom, via interpolation at ``k`` Chebyshev points."""
        k = self.basis.k
        cheb = np.cos(np.pi * (np.arange(k) + 0.5) / k)
        e = self.basis.partition.edges
        x = 0.5 * (e[:-1] + e[1:])[:, None] + 0.5 * np.diff(e)[:, None] * cheb[None, :]
        vals = self(x.ravel()).reshape(x.shape)
        coef = np.linalg.solve(np.vander(cheb, k, increasing=True), vals.T).T
        return [np.polynomial.Polynomial(c, domain=[a, b]) for c, a, b in zip(coef, e[:-1], e[1:])]


def _common_edges(*partitions: Partition1D) -> np.ndarray:
    ends = {(p.left, p.right) for p in partitions}
    if len(ends) != 1:
        raise IncompatibleBasesError("splines live on different intervals")
    return np.unique(np.concatenate([p.edges for p in partitions]))


def inner_product(f: Spline, g: Spline) -> float:
    """Exact ``int f g`` by Gauss quadrature on the common refinement."""
    edges = _common_edges(f.basis.partition, g.basis.partition)
    n = max(1, -(-(f.basis.k + g.basis.k - 1) // 2))
    pts, wts = atom_rule(edges, n)
    return float(np.sum(wts * f(pts) * g(pts)))


def _piece_integral(poly, a, b, p, tol=1e-13, depth=0):
    """``int_a^b |poly|^p`` on a root-free piece.

    Exact Gauss for integer ``p``, adaptive Gauss refinement otherwise.
    """
    def rule(lo, hi, n):
        x, w = gauss_legendre(n)
        return (hi - lo) * np.sum(w * np.abs(poly(lo + (hi - lo) * x)) ** p)
    if float(p).is_integer():
        return rule(a, b, max(1, -(-(int(p) * poly.degree() + 1) // 2)))
    coarse, fine = rule(a, b, 20), rule(a, b, 40)
    if abs(fine - coarse) <= tol * max(abs(fine), 1e-300) or depth > 30:
        return fine
    m = 0.5 * (a + b)
    return (_piece_integral(poly, a, m, p, tol, depth + 1)
            + _piece_integral(poly, m, b, p, tol, depth + 1))


def lp_norm(f: Spline, p: float) -> float:
    """``L^p`` norm of a spline, ``1 <= p <= inf``."""
    if not p >= 1:
        raise ValueError("p must be at least 1")
    polys = f.atom_polynomials()
    edges = f.basis.partition.edges
    if np.isinf(p):
        best = 0.0
        for poly, a, b in zip(polys, edges[:-1], edges[1:]):
            cand = [a, b]
            if poly.degree() >= 2:
                r = poly.deriv().roots()
                r = r[np.abs(r.imag) < 1e-12].real
                cand += list(r[(r > a) & (r < b)])
            best = max(best, float(np.max(np.abs(poly(np.array(cand))))))
        return best
    k = f.basis.k
    if float(p).is_integer() and int(p) % 2 == 0:
        n = max(1, -(-(int(p) * (k - 1) + 1) // 2))
        pts, wts = atom_rule(edges, n)
        return float(np.sum(wts * f(pts) ** int(p)) ** (1.0 / p))
    total = 0.0
    for poly, a, b in zip(polys, edges[:-1], edges[1:]):
        cuts = [a, b]
        if poly.degree() >= 1:
            r = poly.roots()
            r = r[np.abs(r.imag) < 1e-12].real
            cuts += list(r[(r > a) & (r < b)])
        cuts = np.sort(cuts)
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            if hi > lo:
                total += _piece_integral(poly, lo, hi, p)
    return total ** (1.0 / p)


def mode_product(tensor: np.ndarray, mat, axis: int) -> np.ndarray:
    """Apply ``mat`` along ``axis``: ``out[..., i, ...] = sum_j mat[i, j] tensor[..., j, ...]``."""
    if sp.issparse(mat):
        moved = np.moveaxis(tensor, axis, 0)
        out = (mat @ moved.reshape(moved.shape[0], -1)).reshape((mat.shape[0],) + moved.shape[1:])
        return np.moveaxis(out, 0, axis)
    return np.moveaxis(np.tensordot(mat, tensor, axes=([1], [axis])), 0, axis)


class TensorSpline:
    """Tensor-product spline with coefficient array indexed by multi-index."""

    def __init__(self, bases, coeffs):
        self.bases = tuple(bases)
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape != tuple(b.dim for b in self.bases):
            raise ValueError("coefficient tensor shape does not match the factor dimensions")

    @property
    def dim(self):
        return len(self.bases)

    def on_grid(self, axes) -> np.ndarray:
        """Values on the tensor grid ``axes[0] x axes[1] x ...``."""
        out = self.coeffs
        for d, (b, x) in enumerate(zip(self.bases, axes)):
            out = mode_product(out, b.collocation(x, sparse=True), d)
        return out

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        cols = [b.collocation(points[:, d]) for d, b in enumerate(self.bases)]
        out = cols[0] @ self.coeffs.reshape(self.bases[0].dim, -1)
        for d in range(1, self.dim):
            out = np.einsum("pij,pi->pj", out.reshape(points.shape[0], self.bases[d].dim, -1),
                            cols[d])
        return out.reshape(points.shape[0])

    def refine_to(self, bases) -> "TensorSpline":
        out = self.coeffs
        for d, (b, fine) in enumerate(zip(self.bases, bases)):
            out = mode_product(out, b.refinement_matrix(fine), d)
        return TensorSpline(bases, out)


def build_basis(partition: Partition1D, k: int) -> BSplineBasis:
    return BSplineBasis(partition, k)


def local_monomials(basis: BSplineBasis, coeffs: np.ndarray) -> np.ndarray:
    """Per-atom monomial coefficients in the local variable ``t in [0, 1]``.

    ``coeffs`` has shape ``(batch, dim)``; the result has shape
    ``(batch, atoms, k)`` with increasing powers of ``t``.
    """
    k = basis.k
    e = basis.partition.edges
    h = np.diff(e)
    t = (np.arange(k) + 0.5) / k
    x = e[:-1, None] + h[:, None] * t[None, :]
    first, vals = basis.nonzero(x.ravel())
    first = first.reshape(x.shape)
    vals = vals.reshape(x.shape + (k,))
    idx = first[..., None] + np.arange(k)
    coeffs = np.atleast_2d(coeffs)
    values = np.einsum("pak,bpak->bpa", vals, coeffs[:, idx])
    Vinv = np.linalg.inv(np.vander(t, k, increasing=True))
    return np.einsum("ij,bpj->bpi", Vinv, values)


def _unit_roots(P: np.ndarray) -> np.ndarray:
    """Real roots in ``(0, 1)`` of the polynomials ``P`` (rows, increasing powers), padded with 1."""
    n, m = P.shape
    out = np.ones((n, max(m - 1, 1)))
    scale = np.max(np.abs(P), axis=1, initial=0.0)
    deg = np.full(n, -1)
    for j in range(m):
        deg[np.abs(P[:, j]) > 1e-13 * scale] = j
    for d in range(1, m):
        rows = np.nonzero(deg == d)[0]
        if rows.size == 0:
            continue
        c = P[rows, :d + 1] / P[rows, d:d + 1]
        comp = np.zeros((rows.size, d, d))
        comp[:, 1:, :-1] = np.eye(d - 1)
        comp[:, :, -1] = -c[:, :d]
        r = np.linalg.eigvals(comp)
        ok = (np.abs(r.imag) < 1e-10) & (r.real > 0) & (r.real < 1)
        out[rows, :d] = np.where(ok, r.real, 1.0)
    return np.sort(out, axis=1)


def l1_norms(basis: BSplineBasis, coeffs: np.ndarray) -> np.ndarray:
    """``int |s|`` for a batch of splines (rows of ``coeffs``), exact up to root finding."""
    P = local_monomials(basis, coeffs)
    b, a, k = P.shape
    flat = P.reshape(-1, k)
    roots = _unit_roots(flat)
    cuts = np.concatenate([np.zeros((flat.shape[0], 1)), roots, np.ones((flat.shape[0], 1))], axis=1)
    # antiderivative sum_j c_j t^{j+1} / (j+1)
    anti = flat / np.arange(1, k + 1)
    powers = cuts[:, :, None] ** np.arange(1, k + 1)
    F = np.einsum("rcj,rj->rc", powers, anti)
    per_atom = np.abs(np.diff(F, axis=1)).sum(axis=1).reshape(b, a)
    return per_atom @ np.diff(basis.partition.edges)

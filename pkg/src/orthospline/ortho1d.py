"""Univariate orthonormal spline functions on a standard-form filtration.

For each step ``n`` the space ``S_k(F_n)`` exceeds ``S_k(F_{n-1})`` by one
dimension; ``f_n`` spans the orthogonal complement. It is obtained from a
single banded Gram solve: if ``T`` maps coarse to fine coefficients, the
fine coefficients ``c`` of ``f_n`` satisfy ``T^T G c = 0``, so ``G c`` is the
(locally supported) null vector ``w`` of ``T^T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .bspline import BSplineBasis, Spline, lp_norm
from .gram import envelope_decay_fit
from .partition import Filtration1D


class NotStandardFormError(ValueError):
    pass


@dataclass
class OrthoFunction:
    step: int
    spline: Spline
    L: int
    R: int
    J: int = -1
    inserted: int = -1

    @property
    def basis(self) -> BSplineBasis:
        return self.spline.basis

    @property
    def J_length(self) -> float:
        return float(self.basis.partition.lengths[self.J])


def complement_coefficients(coarse: BSplineBasis, x: float) -> tuple[BSplineBasis, np.ndarray, int]:
    """Coefficients of the normalized complement of ``S(coarse)`` after inserting ``x``.

    Returns ``(fine_basis, coeffs, inserted)`` where ``inserted`` is the index
    of the fine B-spline whose last knot is ``x``; its coefficient is made
    positive.
    """
    fine, T, mu = coarse.insert_knot(x)
    k = coarse.k
    rows = np.arange(mu - k + 1, mu + 2)
    cols = np.arange(mu - k + 1, mu + 1)
    local = T[rows][:, cols].toarray()
    null = scipy.linalg.null_space(local.T)
    if null.shape[1] != 1:
        raise NotStandardFormError("refinement does not add exactly one dimension")
    w = np.zeros(fine.dim)
    w[rows] = null[:, 0]
    c = fine.solve_gram(w)
    c /= np.sqrt(c @ fine.gram @ c)
    inserted = mu + 1 - k
    s = c[inserted]
    if s == 0:
        s = c[np.argmax(np.abs(c))]
    return fine, c * np.sign(s), inserted


def haar_function(partition, L: int) -> np.ndarray:
    """Normalized generalized Haar coefficients on atoms ``L`` and ``L + 1``."""
    lens = partition.lengths
    a, b = lens[L], lens[L + 1]
    c = 1.0 / np.sqrt(a * b * (a + b))
    out = np.zeros(partition.n_atoms)
    out[L], out[L + 1] = c * b, -c * a
    return out


def atom_sup(spline: Spline) -> np.ndarray:
    """``max |s|`` on each atom, from the exact polynomial pieces.

    Pieces are taken in the local variable ``t in [-1, 1]``; interior
    critical points are the real eigenvalues of the companion matrices of
    the derivatives, batched over atoms.
    """
    k = spline.basis.k
    coef = np.array([p.coef for p in spline.atom_polynomials()]) if k > 8 else _local_coefficients(spline)
    powers = np.arange(k)
    out = np.maximum(np.abs(coef.sum(axis=1)), np.abs(coef @ (-1.0) ** powers))
    if k < 3:
        return out
    dc = coef[:, 1:] * powers[1:]
    lead = dc[:, -1]
    scale = np.abs(dc).max(axis=1)
    ok = np.abs(lead) > 1e-12 * np.maximum(scale, 1e-300)
    roots = np.full((coef.shape[0], k - 2), np.nan, dtype=complex)
    if k == 3:
        roots[ok, 0] = -dc[ok, 0] / lead[ok]
    elif ok.any():
        comp = np.zeros((int(ok.sum()), k - 2, k - 2))
        comp[:, 1:, :-1] = np.eye(k - 3)
        comp[:, :, -1] = -dc[ok, :-1] / lead[ok, None]
        roots[ok] = np.linalg.eigvals(comp)
    for a in np.nonzero(~ok & (scale > 0))[0]:
        r = np.polynomial.polynomial.polyroots(np.trim_zeros(dc[a], "b")) if np.any(dc[a, :-1]) else []
        roots[a, :len(r)] = r
    real = np.where(np.abs(roots.imag) < 1e-12, roots.real, np.nan)
    real = np.where((real > -1) & (real < 1), real, np.nan)
    vals = np.zeros(real.shape)
    for c in coef.T[::-1]:
        vals = vals * real + c[:, None]
    return np.maximum(out, np.nanmax(np.abs(np.where(np.isnan(real), 0.0, vals)), axis=1))


def _local_coefficients(spline: Spline) -> np.ndarray:
    """Monomial coefficients in ``t in [-1, 1]`` of every atom's polynomial piece."""
    k = spline.basis.k
    cheb = np.cos(np.pi * (np.arange(k) + 0.5) / k)
    e = spline.basis.partition.edges
    x = 0.5 * (e[:-1] + e[1:])[:, None] + 0.5 * np.diff(e)[:, None] * cheb[None, :]
    vals = spline(x.ravel()).reshape(x.shape)
    return np.linalg.solve(np.vander(cheb, k, increasing=True), vals.T).T


def candidate_scores(f: "OrthoFunction") -> list[tuple[int, bool, float]]:
    """Candidates for the characteristic interval: atoms within distance ``k`` of ``L``.

    Each entry is ``(atom, eligible, score)``. An atom is eligible when it is
    the longest atom of some B-spline support containing it, which bounds
    that support by ``k`` times the atom's length. The score
    ``max_A |f| * |A|^{1/2}`` measures how strongly ``f`` concentrates on the
    atom at the atom's own scale.
    """
    basis = f.basis
    p = basis.partition
    k = basis.k
    lens = p.lengths
    sup = atom_sup(f.spline)
    out = []
    for a in range(max(0, f.L - k), min(p.n_atoms, f.L + k + 1)):
        eligible = False
        for i in range(a, a + k):
            lo, hi = basis.support_atoms(i)
            if lo <= a <= hi and lens[a] >= lens[lo:hi + 1].max():
                eligible = True
                break
        out.append((a, eligible, float(sup[a] * np.sqrt(lens[a]))))
    return out


def select_concentrated(cands: list[tuple[int, bool, float]]) -> int:
    """Best-scoring eligible candidate, leftmost on ties; all candidates if none is eligible."""
    pool = [c for c in cands if c[1]] or cands
    best = max(c[2] for c in pool)
    return min(c[0] for c in pool if c[2] == best)


def characteristic_interval(f: OrthoFunction, rule: Callable = select_concentrated) -> int:
    f.J = int(rule(candidate_scores(f)))
    return f.J


def next_ortho_function(filtration: Filtration1D, n: int, k: int,
                        rule: Callable = select_concentrated) -> OrthoFunction:
    if not 1 <= n <= len(filtration):
        raise NotStandardFormError(f"step {n} is not a split step of the filtration")
    coarse = BSplineBasis(filtration.partition(n - 1), k)
    split = filtration.steps[n - 1]
    fine, c, inserted = complement_coefficients(coarse, split.x)
    if fine.partition != filtration.partition(n):
        raise NotStandardFormError("split does not reproduce the next partition")
    f = OrthoFunction(n, Spline(fine, c), split.atom, split.atom + 1, inserted=inserted)
    characteristic_interval(f, rule)
    return f


def ortho_system(filtration: Filtration1D, k: int, rule: Callable = select_concentrated) -> list[OrthoFunction]:
    return [next_ortho_function(filtration, n, k, rule) for n in range(1, len(filtration) + 1)]


def scaled_profile(spline: Spline, J: int) -> tuple[np.ndarray, np.ndarray]:
    """Atom distances to ``J`` and ``max_A |s| |conv(J, A)| / |J|^{1/2}`` per atom."""
    e = spline.basis.partition.edges
    atoms = np.arange(len(e) - 1)
    conv = np.maximum(e[atoms + 1], e[J + 1]) - np.minimum(e[atoms], e[J])
    return np.abs(atoms - J), atom_sup(spline) * conv / np.sqrt(e[J + 1] - e[J])


def franklin_profile(f: OrthoFunction) -> tuple[np.ndarray, np.ndarray]:
    return scaled_profile(f.spline, f.J)


def fit_franklin_decay(f: OrthoFunction | list[OrthoFunction]) -> tuple[float, float]:
    """Envelope fit of the scaled profile, pooled when given several functions.

    Distances up to ``k`` are treated as the near field (the support of
    ``f_n`` spans about ``2k`` atoms around the split), so ``q`` is measured
    on the tail beyond it.
    """
    fs = [f] if isinstance(f, OrthoFunction) else list(f)
    if any(g.J < 0 for g in fs):
        raise ValueError("characteristic interval not assigned")
    prof = [franklin_profile(g) for g in fs]
    d = np.concatenate([p[0] for p in prof])
    v = np.concatenate([p[1] for p in prof])
    return envelope_decay_fit(d, v, near=fs[0].basis.k)


def norm_ratio(f: OrthoFunction, p: float) -> float:
    """``||f||_p / |J|^{1/p - 1/2}``."""
    inv = 0.0 if np.isinf(p) else 1.0 / p
    return lp_norm(f.spline, p) / f.J_length ** (inv - 0.5)

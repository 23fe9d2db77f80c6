"""Orthonormal tensor-product spline systems on standard-form filtrations.

Block ``n`` (``n >= 1``) spans the orthogonal complement of ``S_k(F_{n-1})``
in ``S_k(F_n)``. With ``delta`` the refined direction, its functions are
``f (x) D^{j}`` where ``f`` is the univariate orthonormal function of the
split and, in every other direction ``j``, ``D^j`` runs through a
Gram-Schmidt sequence of B-splines: the normalized dual of the newly added
index with respect to the indices added so far. The directions are
traversed like an odometer whose fastest digit is the last direction of the
permutation ``pi``. Because the sequence in each direction does not depend on
the odometer position, a block is a full tensor grid of factor functions and
is stored in that (Tucker) form.

Block 0 is an orthonormal basis of ``S_k(F_0)``, tensor Legendre
polynomials when ``F_0`` is trivial.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence
import warnings

import numpy as np
import scipy.linalg
import scipy.sparse

from .bspline import BSplineBasis, Spline, TensorSpline, lp_norm, mode_product
from .gram import dual_coefficients, envelope_decay_fit
from .ortho1d import next_ortho_function, scaled_profile, select_concentrated
from .partition import TensorFiltration
from .quadrature import atom_rule

FORMAT_VERSION = 1


class SelectionError(ValueError):
    pass


class QuadratureWarning(UserWarning):
    pass


class SelectionPolicy:
    """Choices left open by the construction: the permutation ``pi`` and the index order.

    ``permutation`` returns the non-split directions ordered by increasing
    ``pi``; the last one varies fastest. ``order`` returns the sequence in
    which B-spline indices of one direction are added to the index set.
    The default is the identity permutation and left-to-right order.
    """

    def permutation(self, n: int, directions: Sequence[int]) -> Sequence[int]:
        return list(directions)

    def order(self, n: int, direction: int, basis: BSplineBasis) -> Sequence[int]:
        return range(basis.dim)


class RandomPolicy(SelectionPolicy):
    """Random permutation and index orders, reproducible from ``seed``."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _rng(self, *key):
        return np.random.default_rng([self.seed, *key])

    def permutation(self, n, directions):
        return list(self._rng(n).permutation(list(directions)))

    def order(self, n, direction, basis):
        return list(self._rng(n, direction + 1).permutation(basis.dim))


def _checked_order(order, dim: int) -> tuple[int, ...]:
    seen: set[int] = set()
    out = []
    for i in order:
        i = int(i)
        if not 0 <= i < dim or i in seen:
            raise SelectionError(f"index {i} is not in the remaining set of a {dim}-element basis")
        seen.add(i)
        out.append(i)
    if len(out) != dim:
        raise SelectionError(f"order selects {len(out)} of {dim} indices")
    return tuple(out)


def dual_sequence(basis: BSplineBasis, order: Sequence[int]) -> np.ndarray:
    """Rows ``t``: coefficients of the normalized dual of ``order[t]`` w.r.t. ``order[:t+1]``.

    Row ``t`` is the unit vector in ``span{N_i : i in order[:t+1]}``
    orthogonal to ``span{N_i : i in order[:t]}``, with positive coefficient
    on ``N_{order[t]}``.
    """
    order = _checked_order(order, basis.dim)
    G = basis.gram
    out = np.zeros((len(order), basis.dim))
    for t, mu in enumerate(order):
        ds = dual_coefficients(G, subset=order[:t + 1])
        a = int(np.searchsorted(ds.subset, mu))
        out[t, ds.subset] = ds.coeffs[a] / np.sqrt(ds.coeffs[a, a])
    return out


def legendre_basis(basis: BSplineBasis) -> np.ndarray:
    """Rows: B-spline coefficients of the orthonormal Legendre polynomials of degree < k."""
    if basis.partition.n_atoms != 1:
        raise ValueError("Legendre basis needs a single-atom partition")
    a, b = basis.partition.left, basis.partition.right
    k = basis.k
    pts, wts = atom_rule(basis.partition.edges, k)
    t = 2.0 * (pts - a) / (b - a) - 1.0
    vals = np.stack([np.sqrt((2 * r + 1) / (b - a)) * np.polynomial.legendre.Legendre.basis(r)(t)
                     for r in range(k)], axis=1)
    return basis.solve_gram(basis.moments(pts, wts, vals)).T


def cholesky_basis(basis: BSplineBasis) -> np.ndarray:
    """Rows of ``L^{-1}`` for ``G = L L^T``: left-to-right Gram-Schmidt of the B-splines."""
    L = scipy.linalg.cholesky(basis.gram, lower=True)
    return scipy.linalg.solve_triangular(L, np.eye(basis.dim), lower=True)


@dataclass
class Block:
    """Functions ``f_{n,1}, ..., f_{n,M_n}`` in tensor-grid form.

    ``mats[j][r]`` holds the coefficients (in the basis ``bases[j]`` of
    ``F_n``) of the ``r``-th factor function in direction ``j``, and
    ``J[j][r]`` its characteristic atom. ``axes`` lists the directions from
    slowest to fastest varying in ``m``.
    """

    n: int
    direction: int
    bases: tuple[BSplineBasis, ...]
    mats: tuple[np.ndarray, ...]
    J: tuple[np.ndarray, ...]
    axes: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.bases)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(m.shape[0] for m in self.mats)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def multi_indices(self) -> np.ndarray:
        """``(size, dim)`` factor row indices of each function, in ``m`` order."""
        grids = np.indices([self.shape[a] for a in self.axes]).reshape(self.dim, -1).T
        out = np.empty_like(grids)
        out[:, list(self.axes)] = grids
        return out

    def to_tensor(self, vec: np.ndarray) -> np.ndarray:
        """Block coefficient vector (length ``size``) to a tensor indexed by factor rows."""
        t = np.asarray(vec).reshape([self.shape[a] for a in self.axes])
        return np.transpose(t, np.argsort(self.axes))

    def from_tensor(self, tensor: np.ndarray) -> np.ndarray:
        return np.transpose(tensor, self.axes).ravel()

    def char_atoms(self) -> np.ndarray:
        idx = self.multi_indices
        return np.stack([self.J[j][idx[:, j]] for j in range(self.dim)], axis=1)


@dataclass
class TensorOrthoFunction:
    index: int
    n: int
    m: int
    factors: tuple[Spline, ...]
    J: tuple[int, ...]
    direction: int

    @property
    def sigma_step(self) -> int:
        """Step of the sigma-algebra associated with the function after rearrangement."""
        return self.n

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.ones(points.shape[0])
        for d, s in enumerate(self.factors):
            out = out * s(points[:, d])
        return out

    def J_box(self) -> tuple[tuple[float, float], ...]:
        return tuple(s.basis.partition.atom(a) for s, a in zip(self.factors, self.J))

    def J_volume(self) -> float:
        return float(np.prod([b - a for a, b in self.J_box()]))

    def norm(self, p: float) -> float:
        return float(np.prod([lp_norm(s, p) for s in self.factors]))

    def to_tensor_spline(self) -> TensorSpline:
        c = self.factors[0].coeffs
        for s in self.factors[1:]:
            c = np.multiply.outer(c, s.coeffs)
        return TensorSpline([s.basis for s in self.factors], c)


class OrthoSystem:
    """The rearranged system ``(f_l)`` with blocks built in filtration order."""

    def __init__(self, filtration: TensorFiltration, k: Sequence[int],
                 policy: SelectionPolicy | None = None, rule: Callable = select_concentrated):
        if len(k) != filtration.dim:
            raise ValueError("need one order per direction")
        self.filtration = filtration
        self.k = tuple(int(x) for x in k)
        self.policy = policy or SelectionPolicy()
        self.rule = rule
        self.blocks: list[Block] = []
        self._dual_cache: dict = {}
        self._basis_cache: dict = {}
        self._refine_cache: dict = {}

    # construction ------------------------------------------------------

    def basis(self, direction: int, count: int) -> BSplineBasis:
        """Basis of direction ``direction`` after ``count`` of its own splits."""
        key = (direction, count)
        if key not in self._basis_cache:
            p = self.filtration.factors[direction].partitions[count]
            self._basis_cache[key] = BSplineBasis(p, self.k[direction])
        return self._basis_cache[key]

    def bases(self, n: int) -> tuple[BSplineBasis, ...]:
        c = self.filtration.factor_counts[n]
        return tuple(self.basis(d, int(c[d])) for d in range(self.filtration.dim))

    def build(self, upto: int | None = None) -> "OrthoSystem":
        upto = self.filtration.n_steps if upto is None else upto
        while len(self.blocks) <= upto:
            self.blocks.append(build_block(self, len(self.blocks)))
        return self

    def _dual_rows(self, direction: int, count: int, order: tuple[int, ...]) -> np.ndarray:
        key = (direction, count, order)
        if key not in self._dual_cache:
            self._dual_cache[key] = dual_sequence(self.basis(direction, count), order)
        return self._dual_cache[key]

    # bookkeeping -------------------------------------------------------

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def block_ends(self) -> np.ndarray:
        """Cumulative counts: functions ``0 .. ends[n] - 1`` span ``S_k(F_n)``."""
        return np.cumsum([b.size for b in self.blocks])

    def __len__(self):
        return int(self.block_ends()[-1]) if self.blocks else 0

    def locate(self, ell: int) -> tuple[int, int]:
        """``(n, m)`` of the global index ``ell`` (0-based ``ell``, 1-based ``m``)."""
        ends = self.block_ends()
        if not 0 <= ell < (ends[-1] if len(ends) else 0):
            raise IndexError(f"function index {ell} out of range")
        n = int(np.searchsorted(ends, ell, side="right"))
        start = 0 if n == 0 else int(ends[n - 1])
        return n, ell - start + 1

    def __getitem__(self, ell: int) -> TensorOrthoFunction:
        n, m = self.locate(ell)
        b = self.blocks[n]
        idx = b.multi_indices[m - 1]
        factors = tuple(Spline(b.bases[j], b.mats[j][idx[j]]) for j in range(b.dim))
        J = tuple(int(b.J[j][idx[j]]) for j in range(b.dim))
        return TensorOrthoFunction(ell, n, m, factors, J, b.direction)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def sigma_steps(self) -> np.ndarray:
        """Step ``n`` of the sigma-algebra associated with each ``f_l``."""
        return np.repeat(np.arange(self.n_blocks), [b.size for b in self.blocks])

    def refinement(self, direction: int, c_from: int, c_to: int):
        """Coefficient map between the bases after ``c_from`` and ``c_to`` splits of a direction."""
        if c_from > c_to:
            raise ValueError("can only refine towards later steps")
        key = (direction, c_from, c_to)
        if key not in self._refine_cache:
            c = c_to
            mat = scipy.sparse.identity(self.basis(direction, c_to).dim, format="csr")
            while c > c_from and (direction, c - 1, c_to) in self._refine_cache:
                c -= 1
                mat = self._refine_cache[(direction, c, c_to)]
            while c > c_from:
                c -= 1
                s = self.filtration.factors[direction].steps[c]
                _, T, _ = self.basis(direction, c).insert_knot(s.x)
                mat = (mat @ T).tocsr()
                self._refine_cache[(direction, c, c_to)] = mat
            self._refine_cache[key] = mat
        return self._refine_cache[key]

    def factor_rows(self, n: int, direction: int, target: int) -> np.ndarray:
        """Factor coefficients of block ``n`` in direction ``direction``, refined to step ``target``."""
        c = self.filtration.factor_counts
        T = self.refinement(direction, int(c[n, direction]), int(c[target, direction]))
        return (T @ self.blocks[n].mats[direction].T).T

    # analysis and synthesis --------------------------------------------

    def synthesize(self, coeffs: np.ndarray, n: int | None = None) -> TensorSpline:
        """``sum_l coeffs[l] f_l`` as a tensor spline on ``F_n`` (default: the last built step)."""
        coeffs = np.asarray(coeffs, dtype=float)
        ends = self.block_ends()
        n = self.n_blocks - 1 if n is None else n
        if coeffs.size > ends[n]:
            raise ValueError(f"{coeffs.size} coefficients exceed the {ends[n]} functions up to step {n}")
        target = self.bases(n)
        out = np.zeros(tuple(b.dim for b in target))
        start = 0
        for nb, blk in enumerate(self.blocks[:n + 1]):
            stop = start + blk.size
            if start >= coeffs.size:
                break
            vec = np.zeros(blk.size)
            part = coeffs[start:min(stop, coeffs.size)]
            vec[:part.size] = part
            t = blk.to_tensor(vec)
            for j in range(blk.dim):
                t = mode_product(t, self.factor_rows(nb, j, n).T, j)
            out += t
            start = stop
        return TensorSpline(target, out)

    def coefficient_matrix(self, n: int | None = None) -> np.ndarray:
        """Rows: ``f_l`` (``l < ends[n]``) in the flattened tensor B-spline basis of ``F_n``."""
        n = self.n_blocks - 1 if n is None else n
        rows = []
        for nb, blk in enumerate(self.blocks[:n + 1]):
            R = [self.factor_rows(nb, j, n) for j in range(blk.dim)]
            idx = blk.multi_indices
            c = R[0][idx[:, 0]]
            for j in range(1, blk.dim):
                c = (c[:, :, None] * R[j][idx[:, j]][:, None, :]).reshape(blk.size, -1)
            rows.append(c)
        return np.vstack(rows)

    def gram(self, n: int | None = None) -> np.ndarray:
        """Inner products ``<f_i, f_l>`` of all functions up to step ``n``, factor by factor."""
        n = self.n_blocks - 1 if n is None else n
        bases = self.bases(n)
        out = None
        for j in range(self.filtration.dim):
            R = np.vstack([self.factor_rows(nb, j, n) for nb in range(n + 1)])
            offs = np.cumsum([0] + [blk.shape[j] for blk in self.blocks[:n]])
            ids = np.concatenate([offs[nb] + blk.multi_indices[:, j]
                                  for nb, blk in enumerate(self.blocks[:n + 1])])
            Gj = R @ bases[j].gram @ R.T
            g = Gj[np.ix_(ids, ids)]
            out = g if out is None else out * g
        return out

    def expand(self, f, upto: int | None = None, n_quad: int | None = None,
               check: bool = True, tol: float = 1e-8) -> np.ndarray:
        """Coefficients ``<f, f_l>`` for ``l`` up to ``upto`` (exclusive; default all).

        ``f`` is a :class:`TensorSpline` on the same domain (integrated
        exactly) or a callable taking ``(npts, dim)`` points. For callables
        the rule is repeated with doubled node count and a
        :class:`QuadratureWarning` reports differences above ``tol``.
        """
        total = len(self)
        upto = total if upto is None else upto
        if isinstance(f, TensorSpline):
            edges, nq = [], []
            for j, b in enumerate(f.bases):
                fine = self.bases(self.n_blocks - 1)[j].partition
                if (b.partition.left, b.partition.right) != (fine.left, fine.right):
                    raise ValueError("function and system live on different domains")
                edges.append(np.union1d(fine.edges, b.partition.edges))
                nq.append(-(-(b.k + self.k[j] - 1) // 2))
            return self._expand_grid(lambda axes: f.on_grid(axes), edges, nq, upto)
        fine = self.bases(self.n_blocks - 1)
        edges = [b.partition.edges for b in fine]
        nq = [n_quad or (kk + 4) for kk in self.k]
        values = _sampler(f)
        out = self._expand_grid(values, edges, nq, upto)
        if check:
            ref = self._expand_grid(values, edges, [2 * q for q in nq], upto)
            err = float(np.max(np.abs(ref - out))) if out.size else 0.0
            if err > tol:
                warnings.warn(f"quadrature error estimate {err:.2e} exceeds {tol:.0e}",
                              QuadratureWarning, stacklevel=2)
        return out

    def _expand_grid(self, values: Callable, edges, nq, upto: int) -> np.ndarray:
        ends = self.block_ends()
        last = int(np.searchsorted(ends, upto, side="left")) if upto > 0 else -1
        out = self._expand_blocks(values, edges, nq, range(last + 1))
        return np.concatenate(out)[:upto] if out else np.zeros(0)

    def block_expand(self, f, n: int, n_quad: int | None = None) -> np.ndarray:
        """Coefficients ``<f, f_{n,m}>``, ``m = 1..M_n``, of a single block."""
        if isinstance(f, TensorSpline):
            edges, nq = [], []
            for j, b in enumerate(f.bases):
                edges.append(np.union1d(self.blocks[n].bases[j].partition.edges, b.partition.edges))
                nq.append(-(-(b.k + self.k[j] - 1) // 2))
            return self._expand_blocks(lambda axes: f.on_grid(axes), edges, nq, [n])[0]
        edges = [b.partition.edges for b in self.blocks[n].bases]
        nq = [n_quad or (kk + 4) for kk in self.k]
        return self._expand_blocks(_sampler(f), edges, nq, [n])[0]

    def _expand_blocks(self, values: Callable, edges, nq, blocks) -> list[np.ndarray]:
        rules = [atom_rule(e, q) for e, q in zip(edges, nq)]
        F = values([r[0] for r in rules])
        out = []
        for nb in blocks:
            blk = self.blocks[nb]
            t = F
            for j, (pts, wts) in enumerate(rules):
                W = blk.bases[j].collocation(pts, sparse=True).multiply(wts[:, None])
                t = mode_product(t, (W @ blk.mats[j].T).T, j)
            out.append(blk.from_tensor(t))
        return out

    # persistence -------------------------------------------------------

    def dump(self, path) -> None:
        data = {"format_version": np.array(FORMAT_VERSION),
                "filtration": np.array(self.filtration.to_json()),
                "k": np.array(self.k),
                "n_blocks": np.array(self.n_blocks)}
        for blk in self.blocks:
            data[f"b{blk.n}_direction"] = np.array(blk.direction)
            data[f"b{blk.n}_axes"] = np.array(blk.axes)
            for j in range(blk.dim):
                data[f"b{blk.n}_mat{j}"] = blk.mats[j]
                data[f"b{blk.n}_J{j}"] = blk.J[j]
        with open(path, "wb") as fh:
            np.savez(fh, **data)

    @classmethod
    def load(cls, path) -> "OrthoSystem":
        with np.load(path) as z:
            if int(z["format_version"]) != FORMAT_VERSION:
                raise ValueError(f"unsupported system format {int(z['format_version'])}")
            tf = TensorFiltration.from_json(str(z["filtration"]))
            sys = cls(tf, tuple(int(x) for x in z["k"]))
            for n in range(int(z["n_blocks"])):
                sys.blocks.append(Block(
                    n, int(z[f"b{n}_direction"]), sys.bases(n),
                    tuple(z[f"b{n}_mat{j}"] for j in range(tf.dim)),
                    tuple(z[f"b{n}_J{j}"] for j in range(tf.dim)),
                    tuple(int(a) for a in z[f"b{n}_axes"])))
        return sys


def _sampler(f: Callable) -> Callable:
    """Adapter evaluating a point function ``f((npts, dim))`` on a tensor grid."""
    def values(axes):
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        return np.asarray(f(pts), dtype=float).reshape(mesh[0].shape)
    return values


def build_block(system: OrthoSystem, n: int) -> Block:
    """Construct block ``n`` of ``system`` (blocks ``< n`` need not exist)."""
    tf = system.filtration
    bases = system.bases(n)
    counts = tf.factor_counts[n]
    if n == 0:
        mats, J = [], []
        for b in bases:
            m = legendre_basis(b) if b.partition.n_atoms == 1 else cholesky_basis(b)
            mats.append(m)
            J.append(b.largest_atoms.copy())
        return Block(0, -1, bases, tuple(mats), tuple(J), tuple(range(tf.dim)))
    info = tf.step_info(n)
    delta = info.direction
    f = next_ortho_function(tf.factors[delta], info.factor_step, system.k[delta], system.rule)
    others = [j for j in range(tf.dim) if j != delta]
    perm = [int(j) for j in system.policy.permutation(n, others)]
    if sorted(perm) != others:
        raise SelectionError(f"permutation {perm} does not cover directions {others}")
    mats: list = [None] * tf.dim
    J: list = [None] * tf.dim
    mats[delta] = f.spline.coeffs[None, :]
    J[delta] = np.array([f.J])
    for j in others:
        order = _checked_order(system.policy.order(n, j, bases[j]), bases[j].dim)
        mats[j] = system._dual_rows(j, int(counts[j]), order)
        J[j] = bases[j].largest_atoms[list(order)]
    return Block(n, delta, bases, tuple(mats), tuple(J), tuple([delta] + perm))


def build_system(filtration: TensorFiltration, k: Sequence[int],
                 policy: SelectionPolicy | None = None, upto: int | None = None) -> OrthoSystem:
    return OrthoSystem(filtration, k, policy).build(upto)


def rearrange(system: OrthoSystem) -> list[tuple[int, int, tuple[int, ...]]]:
    """``(l, sigma step, J_l)`` for every function in lexicographic ``(n, m)`` order."""
    out = []
    ell = 0
    for blk in system.blocks:
        for J in blk.char_atoms():
            out.append((ell, blk.n, tuple(int(a) for a in J)))
            ell += 1
    return out


def _maxplus(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[s] = max_{i + j = s} a[i] * b[j]`` for nonnegative arrays."""
    out = np.zeros(a.size + b.size - 1)
    for i, v in enumerate(a):
        np.maximum(out[i:i + b.size], v * b, out=out[i:i + b.size])
    return out


def _direction_envelope(blk: Block, j: int) -> np.ndarray:
    env = np.zeros(blk.bases[j].partition.n_atoms)
    for row, J in zip(blk.mats[j], blk.J[j]):
        d, v = scaled_profile(Spline(blk.bases[j], row), int(J))
        np.maximum.at(env, d, v)
    return env


def tensor_profile(system: OrthoSystem, blocks: Sequence[int] | None = None) -> np.ndarray:
    """Envelope ``E[s]`` of ``|f_{n,m}| |conv(J_{n,m}, A)| / |J_{n,m}|^{1/2}`` over atoms ``A``
    at ``l^1`` atom distance ``s``, maximized over all functions of the chosen blocks.

    Both the function and the weights are products over directions, so the
    envelope is the max-plus convolution of per-direction envelopes.
    """
    blocks = range(1, system.n_blocks) if blocks is None else blocks
    env = np.zeros(1)
    for n in blocks:
        blk = system.blocks[n]
        e = np.ones(1)
        for j in range(blk.dim):
            e = _maxplus(e, _direction_envelope(blk, j))
        if e.size > env.size:
            env = np.pad(env, (0, e.size - env.size))
        env[:e.size] = np.maximum(env[:e.size], e)
    return env


def fit_tensor_decay(system: OrthoSystem, blocks: Sequence[int] | None = None) -> tuple[float, float]:
    """Envelope fit ``E[s] <= C q^max(0, s - sum(k))`` over the given blocks (default: all but 0)."""
    env = tensor_profile(system, blocks)
    return envelope_decay_fit(np.arange(env.size), env, near=sum(system.k))


def norm_products(system: OrthoSystem, blocks: Sequence[int] | None = None) -> np.ndarray:
    """``||f_{n,m}||_1 ||f_{n,m}||_inf`` for every function of the chosen blocks.

    Both norms factor over directions; under the norm equivalence with
    ``|J_{n,m}|^{1/p - 1/2}`` the product stays bounded.
    """
    blocks = range(1, system.n_blocks) if blocks is None else blocks
    out = []
    for n in blocks:
        blk = system.blocks[n]
        per = [np.array([lp_norm(Spline(blk.bases[j], r), 1) * lp_norm(Spline(blk.bases[j], r), np.inf)
                         for r in blk.mats[j]]) for j in range(blk.dim)]
        idx = blk.multi_indices
        out.append(np.prod([per[j][idx[:, j]] for j in range(blk.dim)], axis=0))
    return np.concatenate(out) if out else np.zeros(0)

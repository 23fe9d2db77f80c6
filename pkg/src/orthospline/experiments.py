"""Empirical harness: sign-flip weak-type sweeps, a.e. convergence, the
maximal collection with its Calderon-Zygmund split, and the Remez check.

Everything here is deterministic given a seed; grids are tensor grids of
sub-cell midpoints (or Gauss nodes) of the finest partition in use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Sequence

import numpy as np

from .bspline import BSplineBasis, TensorSpline, mode_product
from .partition import Filtration1D, Partition1D, TensorFiltration, random_filtration
from .projection import MaximalEvaluator
from .quadrature import atom_rule
from .regularity import (direction_regularity_parameter, dyadic_extension, example_from_trivial,
                         random_quasi_dyadic, regularity_parameter, support_ranges)
from .tensor_ortho import OrthoSystem, _sampler, fit_tensor_decay


class DegenerateInputError(ValueError):
    pass


# -- configuration -----------------------------------------------------------

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "format_version": {"const": 1},
        "filtration": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["random", "dyadic", "quasi_dyadic", "example", "file"]},
                "dim": {"type": "integer", "minimum": 1, "maximum": 3},
                "steps": {"type": "integer", "minimum": 0},
                "levels": {"type": "integer", "minimum": 1},
                "ell": {"type": "integer", "minimum": 2},
                "path": {"type": "string"},
                "min_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
            },
            "required": ["kind"],
        },
        "k": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 6}, "minItems": 1},
        "coefficients": {
            "type": "object",
            "properties": {
                "model": {"enum": ["gaussian", "target"]},
                "target": {"type": "string"},
                "n_functions": {"type": "integer", "minimum": 1},
            },
        },
        "signs": {
            "type": "object",
            "properties": {
                "model": {"enum": ["random", "identity", "all_flip", "enumerate"]},
                "count": {"type": "integer", "minimum": 1},
            },
        },
        "lambdas": {
            "type": "object",
            "properties": {
                "values": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "relative": {"type": "boolean"},
                "min": {"type": "number", "exclusiveMinimum": 0},
                "max": {"type": "number", "exclusiveMinimum": 0},
                "count": {"type": "integer", "minimum": 1},
            },
        },
        "grid": {"type": "object", "properties": {"sub": {"type": "integer", "minimum": 1, "maximum": 16}}},
        "seed": {"type": "integer", "minimum": 0},
        "cap": {"type": "integer", "minimum": 2},
    },
    "required": ["filtration", "k"],
}


@dataclass
class ExperimentConfig:
    filtration: dict
    k: tuple[int, ...]
    coefficients: dict = field(default_factory=lambda: {"model": "gaussian"})
    signs: dict = field(default_factory=lambda: {"model": "random", "count": 64})
    lambdas: dict = field(default_factory=lambda: {"min": 0.5, "max": 64.0, "count": 13, "relative": True})
    grid: dict = field(default_factory=lambda: {"sub": 4})
    seed: int = 0
    cap: int = 12

    def __post_init__(self):
        self.k = tuple(int(x) for x in self.k)
        vals = self.lambdas.get("values")
        if vals is not None and np.any(np.diff(vals) <= 0):
            raise ValueError("lambda grid must be increasing")
        if self.lambdas.get("min", 1.0) > self.lambdas.get("max", 1.0):
            raise ValueError("lambda grid must be increasing")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        import jsonschema
        jsonschema.validate(data, CONFIG_SCHEMA)
        keys = {"filtration", "k", "coefficients", "signs", "lambdas", "grid", "seed", "cap"}
        return cls(**{key: data[key] for key in keys if key in data})

    def to_dict(self) -> dict:
        return {"format_version": 1, "filtration": self.filtration, "k": list(self.k),
                "coefficients": self.coefficients, "signs": self.signs, "lambdas": self.lambdas,
                "grid": self.grid, "seed": self.seed, "cap": self.cap}

    def lambda_grid(self, scale: float) -> np.ndarray:
        lam = self.lambdas
        if "values" in lam:
            out = np.asarray(lam["values"], dtype=float)
        else:
            out = np.geomspace(lam.get("min", 0.5), lam.get("max", 64.0), lam.get("count", 13))
        return out * scale if lam.get("relative", True) else out


def example_tensor_filtration(ell: int, k: Sequence[int]) -> TensorFiltration:
    """Example family in direction 0, interleaved with dyadic levels in the other directions."""
    k = list(k)
    ex = example_from_trivial(ell, k[0])
    streams = [[(0, s.atom, s.x) for s in ex.steps]]
    for j in range(1, len(k)):
        st, p = [], Partition1D(-1.0, 1.0)
        while len(st) < len(ex.steps):
            for i in range(p.n_atoms):
                a, b = p.atom(i)
                st.append((j, 2 * i, 0.5 * (a + b)))
            p = Partition1D(-1.0, 1.0, tuple(sorted(set(p.breakpoints) | {s[2] for s in st})))
        streams.append(st[:len(ex.steps)])
    steps = [s for group in zip(*streams) for s in group]
    return TensorFiltration.trivial([(-1.0, 1.0)] * len(k)).extend(steps)


def make_filtration(spec: dict, k: Sequence[int], rng: np.random.Generator) -> TensorFiltration:
    """Build a filtration from a generator spec (see :data:`CONFIG_SCHEMA`)."""
    kind = spec["kind"]
    dim = int(spec.get("dim", len(k)))
    if kind == "file":
        with open(spec["path"]) as fh:
            return TensorFiltration.from_json(fh.read())
    if kind == "random":
        return random_filtration(rng, dim, int(spec.get("steps", 40)),
                                 min_fraction=float(spec.get("min_fraction", 0.05)))
    if kind == "dyadic":
        return dyadic_extension([Partition1D(0.0, 1.0)] * dim, int(spec.get("levels", 3)))
    if kind == "quasi_dyadic":
        return random_quasi_dyadic(rng, dim, int(spec.get("levels", 3)))
    if kind == "example":
        return example_tensor_filtration(int(spec.get("ell", 8)), list(k)[:dim] or [2])
    raise ValueError(f"unknown filtration kind {kind!r}")


# -- target functions --------------------------------------------------------

def _kink_point(a: float, b: float) -> float:
    return a + (b - a) * (math.sqrt(0.5) - 0.1)


def make_target(name: str, domain: Sequence[tuple[float, float]]):
    """Named test functions; piecewise polynomial ones come back as exact tensor splines."""
    d = len(domain)

    def const(a, b):
        return BSplineBasis(Partition1D(a, b), 1), np.ones(1)

    def split(a, b, k):
        return BSplineBasis(Partition1D(a, b, (_kink_point(a, b),)), k)

    if name in ("abs", "jump", "corner"):
        bases, coeffs = [], []
        for j, (a, b) in enumerate(domain):
            c = _kink_point(a, b)
            if name == "jump" and j == 0:
                bases.append(split(a, b, 1))
                coeffs.append(np.array([0.0, 1.0]))
            elif name == "abs" and j == 0 or name == "corner":
                bases.append(split(a, b, 2))
                coeffs.append(np.array([c - a, 0.0, b - c]))
            else:
                bs, cf = const(a, b)
                bases.append(bs)
                coeffs.append(cf)
        t = coeffs[0]
        for c in coeffs[1:]:
            t = np.multiply.outer(t, c)
        return TensorSpline(bases, t)
    lo = np.array([a for a, _ in domain])
    width = np.array([b - a for a, b in domain])
    if name == "peak":
        centre = lo + width * (math.sqrt(0.5) - 0.1)
        return lambda x: np.exp(-np.sum(((x - centre) / (0.05 * width)) ** 2, axis=1))
    if name == "smooth":
        return lambda x: np.prod(np.cos(2.5 * (x - lo) / width), axis=1) + 0.3
    raise ValueError(f"unknown target {name!r}")


# -- sign-flip weak type -----------------------------------------------------

def cell_grid(partitions: Sequence[Partition1D], sub: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Sub-cell midpoints per direction and the tensor of sub-cell volumes."""
    axes, vol = [], np.ones(())
    for p in partitions:
        h = np.repeat(p.lengths / sub, sub)
        left = np.repeat(p.edges[:-1], sub) + np.tile(np.arange(sub), p.n_atoms) * h
        axes.append(left + 0.5 * h)
        vol = np.multiply.outer(vol, h)
    return axes, vol


def make_signs(model: str, n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if model == "identity":
        return np.ones((1, n))
    if model == "all_flip":
        return -np.ones((1, n))
    if model == "random":
        return rng.choice([-1.0, 1.0], size=(count, n))
    if model == "enumerate":
        if n > 16:
            raise ValueError("sign enumeration is limited to 16 functions")
        return np.array(list(product([1.0, -1.0], repeat=n)))
    raise ValueError(f"unknown sign model {model!r}")


def running_sup(system: OrthoSystem, coeffs: np.ndarray, signs: np.ndarray,
                axes: Sequence[np.ndarray], vol: np.ndarray) -> tuple[np.ndarray, float]:
    """Stream ``l = 0, 1, ...`` and keep ``sup_M |sum_{l <= M} eps_l a_l f_l|`` on the grid.

    Row 0 of the result uses all signs ``+1``; row ``r + 1`` uses
    ``signs[r]``. Also returns ``sup_M ||sum_{l <= M} a_l f_l||_1``.
    """
    L = coeffs.size
    w = np.vstack([np.ones(L), signs]) * coeffs
    G = vol.size
    S = np.zeros((w.shape[0], G))
    run = np.zeros_like(S)
    v = vol.ravel()
    norm = 0.0
    ell = 0
    for blk in system.blocks:
        if ell >= L:
            break
        V = [blk.mats[j] @ blk.bases[j].collocation(axes[j]).T for j in range(blk.dim)]
        for idx in blk.multi_indices:
            if ell >= L:
                break
            f = V[0][idx[0]]
            for j in range(1, blk.dim):
                f = np.multiply.outer(f, V[j][idx[j]])
            S += w[:, ell, None] * f.ravel()[None, :]
            np.maximum(run, np.abs(S), out=run)
            norm = max(norm, float(np.abs(S[0]) @ v))
            ell += 1
    return run, norm


def superlevel_measures(values: np.ndarray, vol: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """``|{values[r] > lam}|`` for every row ``r`` and every ``lam``."""
    v = vol.ravel()
    out = np.empty((values.shape[0], lambdas.size))
    for r, row in enumerate(values):
        order = np.argsort(row)
        tail = np.concatenate([np.cumsum(v[order][::-1])[::-1], [0.0]])
        out[r] = tail[np.searchsorted(row[order], lambdas, side="right")]
    return out


@dataclass
class WeakTypeResult:
    lambdas: np.ndarray
    measures: np.ndarray       # (signs, lambdas)
    ratios: np.ndarray         # (signs, lambdas)
    unsigned_ratios: np.ndarray
    norm: float
    metadata: dict = field(default_factory=dict)

    @property
    def ratio(self) -> np.ndarray:
        return self.ratios.max(axis=0)

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max())

    @property
    def per_sign_max(self) -> np.ndarray:
        return self.ratios.max(axis=1)

    def rows(self) -> list[dict]:
        best = np.argmax(self.ratios, axis=0)
        return [{"lambda": float(l), "measure": float(self.measures[b, i]), "ratio": float(self.ratios[b, i])}
                for i, (l, b) in enumerate(zip(self.lambdas, best))]


def weak_type_ratios(system: OrthoSystem, coeffs: np.ndarray, signs: np.ndarray,
                     lambdas: np.ndarray | None = None, sub: int = 4,
                     relative: bool = True) -> WeakTypeResult:
    """Sign-flip weak-type ratios for fixed coefficients on the finest partition's cell grid."""
    coeffs = np.asarray(coeffs, dtype=float)
    signs = np.atleast_2d(np.asarray(signs, dtype=float))
    if signs.shape[1] < coeffs.size:
        raise ValueError("need one sign per coefficient")
    tf = system.filtration
    axes, vol = cell_grid([b.partition for b in system.bases(system.n_blocks - 1)], sub)
    run, norm = running_sup(system, coeffs, signs[:, :coeffs.size], axes, vol)
    if not norm > 1e-14 * max(1.0, float(np.abs(coeffs).max(initial=0.0))) * math.sqrt(tf.volume()):
        raise DegenerateInputError("sup_M ||partial sum||_1 vanishes")
    lam = np.geomspace(0.5, 64.0, 13) if lambdas is None else np.asarray(lambdas, dtype=float)
    if relative:
        lam = lam * norm / tf.volume()
    meas = superlevel_measures(run, vol, lam)
    ratios = lam[None, :] * meas / norm
    return WeakTypeResult(lam, meas[1:], ratios[1:], ratios[0], norm)


def system_from_config(config: ExperimentConfig) -> tuple[OrthoSystem, np.random.Generator]:
    rng = np.random.default_rng(config.seed)
    tf = make_filtration(config.filtration, config.k, rng)
    if len(config.k) != tf.dim:
        raise ValueError(f"config gives {len(config.k)} orders for a {tf.dim}-dimensional filtration")
    return OrthoSystem(tf, config.k).build(), rng


def coefficients_from_config(system: OrthoSystem, config: ExperimentConfig,
                             rng: np.random.Generator) -> np.ndarray:
    L = min(int(config.coefficients.get("n_functions", len(system))), len(system))
    if config.coefficients.get("model", "gaussian") == "gaussian":
        return rng.standard_normal(L)
    target = make_target(config.coefficients.get("target", "peak"), system.filtration.domain)
    return system.expand(target, upto=L, n_quad=12, check=False)


def sign_flip_experiment(config: ExperimentConfig, system: OrthoSystem | None = None) -> WeakTypeResult:
    """``lam |{sup_M |sum_{l <= M} eps_l a_l f_l| > lam}| / sup_M ||sum_{l <= M} a_l f_l||_1``."""
    if system is None:
        system, rng = system_from_config(config)
    else:
        rng = np.random.default_rng(config.seed)
    a = coefficients_from_config(system, config, rng)
    signs = make_signs(config.signs.get("model", "random"), a.size, int(config.signs.get("count", 64)), rng)
    lam = config.lambda_grid(1.0)
    res = weak_type_ratios(system, a, signs, lam, int(config.grid.get("sub", 4)),
                           relative=config.lambdas.get("relative", True))
    gam, _ = regularity_parameter(system.filtration, list(config.k))
    beta, _ = direction_regularity_parameter(system.filtration, list(config.k), config.cap)
    q = fit_tensor_decay(system)[1] if system.n_blocks > 1 else 0.0
    res.metadata = {"gamma": max(gam), "beta": beta, "q_fit": q, "n_functions": int(a.size),
                    "n_signs": int(signs.shape[0])}
    return res


# -- almost everywhere convergence -------------------------------------------

@dataclass
class AESweep:
    Ls: np.ndarray
    sup_error: np.ndarray
    median_error: np.ndarray
    axes: list
    errors: np.ndarray  # (len(Ls), grid size)

    def rows(self) -> list[dict]:
        return [{"L": int(L), "sup_error": float(s), "median_error": float(m)}
                for L, s, m in zip(self.Ls, self.sup_error, self.median_error)]


def ae_convergence_sweep(f, system: OrthoSystem, Ls: Sequence[int] | None = None,
                         grid: int = 101, n_quad: int = 12) -> AESweep:
    """Pointwise error of ``sum_{l <= L} <f, f_l> f_l`` on a fixed midpoint grid."""
    tf = system.filtration
    axes = [a + (b - a) * (np.arange(grid) + 0.5) / grid for a, b in tf.domain]
    target = f.on_grid(axes) if isinstance(f, TensorSpline) else _sampler(f)(axes)
    coeffs = system.expand(f, n_quad=n_quad, check=False)
    if Ls is None:
        Ls = np.unique(np.geomspace(1, len(system), 12).astype(int))
    Ls = np.asarray(Ls, dtype=int)
    errs = np.empty((Ls.size, target.size))
    for i, L in enumerate(Ls):
        s = system.synthesize(coeffs[:L])
        errs[i] = np.abs(s.on_grid(axes) - target).ravel()
    return AESweep(Ls, errs.max(axis=1), np.median(errs, axis=1), axes, errs)


# -- the maximal collection ----------------------------------------------------

def _runs(p: Partition1D, k: int, c: float) -> list[tuple[int, int]]:
    """Runs ``[lo, hi]`` of 1..3k atoms with long end atoms that contain an order-``k`` support."""
    e = p.edges
    ln = p.lengths
    sup = support_ranges(p.n_atoms, k)
    out = []
    for lo in range(p.n_atoms):
        for hi in range(lo, min(p.n_atoms, lo + 3 * k)):
            U = e[hi + 1] - e[lo]
            if min(ln[lo], ln[hi]) < c * U:
                continue
            if any(lo <= a and b <= hi for a, b in sup):
                out.append((lo, hi))
    return out


@dataclass
class Collection:
    """Boxes of the maximal collection as index ranges into the finest partition.

    ``lo[i], hi[i]`` are inclusive finest-atom ranges per direction,
    ``step[i]`` is the first step at which the box is a member, and
    ``step_lo``/``step_hi`` are the atom ranges in that step's partition.
    """

    filtration: TensorFiltration
    k: tuple[int, ...]
    c: tuple[float, ...]
    base_steps: int
    depth: int
    lo: np.ndarray
    hi: np.ndarray
    step: np.ndarray
    step_lo: np.ndarray
    step_hi: np.ndarray

    def __len__(self):
        return int(self.step.size)

    @property
    def fine(self) -> tuple[Partition1D, ...]:
        return self.filtration.partitions(self.depth)

    def bounds(self, i: int) -> tuple[tuple[float, float], ...]:
        return tuple((float(p.edges[self.lo[i, j]]), float(p.edges[self.hi[i, j] + 1]))
                     for j, p in enumerate(self.fine))

    def volumes(self) -> np.ndarray:
        out = np.ones(len(self))
        for j, p in enumerate(self.fine):
            out *= p.edges[self.hi[:, j] + 1] - p.edges[self.lo[:, j]]
        return out

    def box_sums(self, cells: np.ndarray) -> np.ndarray:
        """Sums of a finest-cell array over every box, by inclusion-exclusion on prefix sums."""
        P = cells
        for j in range(P.ndim):
            P = np.cumsum(P, axis=j)
            P = np.concatenate([np.zeros_like(P.take([0], axis=j)), P], axis=j)
        out = np.zeros(len(self))
        d = cells.ndim
        for corner in product([0, 1], repeat=d):
            idx = tuple(np.where(c, self.hi[:, j] + 1, self.lo[:, j]) for j, c in enumerate(corner))
            out += (-1) ** (d - sum(corner)) * P[idx]
        return out

    def mask(self, i: int) -> tuple[slice, ...]:
        return tuple(slice(self.lo[i, j], self.hi[i, j] + 1) for j in range(self.lo.shape[1]))


def _run_table(tf: TensorFiltration, n: int, j: int, k: int, c: float, fine: Partition1D):
    p = tf.partition(n, j)
    runs = _runs(p, k, c)
    e = p.edges
    if not runs:
        return np.zeros((0, 4), dtype=int)
    r = np.array(runs)
    flo = np.searchsorted(fine.edges, e[r[:, 0]])
    fhi = np.searchsorted(fine.edges, e[r[:, 1] + 1]) - 1
    return np.stack([flo, fhi, r[:, 0], r[:, 1]], axis=1)


def _covered(tf: TensorFiltration, base_steps: int, k: Sequence[int], c: Sequence[float]) -> bool:
    """Every finest cell lies in a member of the last step's collection inside its base atom."""
    a = tf.n_steps
    for j in range(tf.dim):
        fine = tf.partition(a, j)
        base = tf.partition(base_steps, j)
        t = _run_table(tf, a, j, k[j], c[j], fine)
        owner = base.atom_of(fine.midpoints())
        ok = np.zeros(fine.n_atoms, dtype=bool)
        for flo, fhi, _, _ in t:
            if owner[flo] == owner[fhi]:
                ok[flo:fhi + 1] = True
        if not ok.all():
            return False
    return True


def build_collection_C(filtration: TensorFiltration, k: Sequence[int], gamma: float | None = None,
                       base_steps: int | None = None, max_levels: int = 6,
                       c: Sequence[float] | None = None) -> Collection:
    """The collection of boxes ``U^1 x ... x U^d`` over all steps up to the covering depth.

    ``U^j`` is a run of ``1 .. 3 k_j`` atoms whose end atoms are at least
    ``c_j |U^j|`` long and which contains an order-``k_j`` support; by
    default ``c_j = 1 / (3 k_j gamma)``. The filtration (truncated after
    ``base_steps``) is extended by dyadic levels until each finest cell of
    the last step lies in a member of that step contained in its atom at
    ``base_steps``; that last step is the depth ``a(N)``.
    """
    k = tuple(int(x) for x in k)
    N = filtration.n_steps if base_steps is None else base_steps
    tf = filtration.prefix(N)
    if gamma is None:
        gamma = max(regularity_parameter(tf, list(k))[0])
    c = tuple(1.0 / (3 * kk * gamma) for kk in k) if c is None else tuple(c)
    levels = 0
    while not _covered(tf, N, k, c):
        if levels >= max_levels:
            raise RuntimeError(f"no covering depth within {max_levels} dyadic levels")
        tf = dyadic_extension(tf, 1)
        levels += 1
    a = tf.n_steps
    fine = tf.partitions(a)
    d = tf.dim
    radix = [p.n_atoms + 1 for p in fine]
    keys, steps, tables = [], [], []
    prev = None
    for n in range(a + 1):
        parts = tf.partitions(n)
        if parts == prev:
            continue
        prev = parts
        T = [_run_table(tf, n, j, k[j], c[j], fine[j]) for j in range(d)]
        if any(t.shape[0] == 0 for t in T):
            continue
        grids = np.meshgrid(*[np.arange(t.shape[0]) for t in T], indexing="ij")
        sel = [g.ravel() for g in grids]
        key = np.zeros(sel[0].size, dtype=np.int64)
        rows = []
        for j in range(d):
            r = T[j][sel[j]]
            key = key * (radix[j] * radix[j]) + r[:, 0] * radix[j] + r[:, 1]
            rows.append(r)
        keys.append(key)
        steps.append(np.full(key.size, n))
        tables.append(np.stack(rows, axis=1))
    keys = np.concatenate(keys)
    steps = np.concatenate(steps)
    tables = np.concatenate(tables)
    _, first = np.unique(keys, return_index=True)
    first = np.sort(first)
    t = tables[first]
    return Collection(tf, k, c, N, a, t[:, :, 0], t[:, :, 1], steps[first], t[:, :, 2], t[:, :, 3])


def collection_maximal_function(coll: Collection, cells: np.ndarray) -> np.ndarray:
    """``sup_{B ni x} |B|^{-1} int_B |u|`` on the finest cells, from cell integrals of ``|u|``."""
    avg = coll.box_sums(cells) / coll.volumes()
    out = np.zeros(cells.shape)
    for i in np.argsort(avg):
        out[coll.mask(i)] = avg[i]
    return out


# -- Calderon-Zygmund decomposition -------------------------------------------

@dataclass
class CZDecomposition:
    lam: float
    E: list                    # collection indices, in enumeration order
    boxes: list                # bounds of each E_j
    steps: list                # n(E_j)
    V: np.ndarray              # finest-cell label: j for cells in V_j, -1 on the complement of G
    G: np.ndarray              # finest-cell mask of G_lambda
    Q: list                    # TensorSpline Q_{E_j}(f 1_{V_j}) on E_j
    f: TensorSpline
    fine: tuple
    norm1: float
    trivial: bool = False
    overlap: int = 0
    local_ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))
    h_sq: float = 0.0
    h_sup: float = 0.0
    residual: float = 0.0
    orthogonality: float = 0.0

    def values(self, axes: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """``(h, g)`` on a tensor grid (points are assigned to finest cells half-open)."""
        f = self.f.on_grid(axes)
        if self.trivial or not self.E:
            return f, np.zeros_like(f)
        idx = [p.atom_of(np.asarray(x)) for p, x in zip(self.fine, axes)]
        lab = self.V[np.ix_(*idx)]
        h = np.where(lab < 0, f, 0.0)
        g = np.where(lab >= 0, f, 0.0)
        for j, q in enumerate(self.Q):
            sel = [(x >= lo) & (x < hi) for x, (lo, hi) in zip(axes, self.boxes[j])]
            if not all(s.any() for s in sel):
                continue
            qv = q.on_grid([x[s] for x, s in zip(axes, sel)])
            ix = np.ix_(*[np.nonzero(s)[0] for s in sel])
            h[ix] += qv
            g[ix] -= qv
        return h, g


def _local_basis(p: Partition1D, lo: float, hi: float, k: int) -> BSplineBasis:
    inner = tuple(x for x in p.breakpoints if lo < x < hi)
    return BSplineBasis(Partition1D(lo, hi, inner), k)


def cz_decompose(f: TensorSpline, lam: float, coll: Collection, sub: int = 4,
                 n_quad: int = 4) -> CZDecomposition:
    """Split ``f = h + g`` at height ``lam`` along the maximal members of the collection.

    ``E_j`` are the inclusion-maximal boxes with ``|E|^{-1} int_E |f| > lam``
    enumerated lexicographically by ``(n(E), atom ranges)``; ``V_j`` is
    ``E_j`` minus earlier ``E_i``; ``Q_{E_j}`` projects orthogonally onto
    the tensor splines of order ``k`` on the atoms of step ``n(E_j)``
    inside ``E_j``. Integrals of ``|f|`` use composite Gauss rules; all
    other integrals are exact on the finest cells. ``residual`` is
    ``max |f - h - g|`` on the Gauss nodes relative to ``max(1, max |f|)``.
    """
    if len(coll) == 0:
        raise ValueError("the collection is empty")
    tf = coll.filtration
    fine = coll.fine
    for b, p in zip(f.bases, fine):
        if not set(b.partition.breakpoints) <= set(p.breakpoints):
            raise ValueError("f is not piecewise polynomial on the finest partition")
    cells = MaximalEvaluator(tf, 0.0, steps=[coll.depth]).cell_integrals(f, sub=sub, n_quad=n_quad)
    norm1 = float(cells.sum())
    shape = cells.shape
    base = dict(lam=float(lam), f=f, fine=fine, norm1=norm1)
    if norm1 > lam * tf.volume() / 2:
        return CZDecomposition(E=[], boxes=[], steps=[], V=-np.ones(shape, dtype=int),
                               G=np.zeros(shape, dtype=bool), Q=[], trivial=True, **base)
    avg = coll.box_sums(cells) / coll.volumes()
    cand = np.nonzero(avg > lam)[0]
    lo, hi = coll.lo[cand], coll.hi[cand]
    maximal = np.ones(cand.size, dtype=bool)
    for s in range(0, cand.size, 512):
        blk = slice(s, s + 512)
        inside = np.all((lo[:, None, :] <= lo[None, blk, :]) & (hi[None, blk, :] <= hi[:, None, :]), axis=2)
        same = np.all((lo[:, None, :] == lo[None, blk, :]) & (hi[:, None, :] == hi[None, blk, :]), axis=2)
        maximal[blk] = ~np.any(inside & ~same, axis=0)
    E = cand[maximal]
    keys = [coll.step_hi[E, j] for j in reversed(range(tf.dim))] + \
           [coll.step_lo[E, j] for j in reversed(range(tf.dim))] + [coll.step[E]]
    E = E[np.lexsort(keys)]
    V = -np.ones(shape, dtype=int)
    count = np.zeros(shape, dtype=int)
    for j, i in enumerate(E):
        m = coll.mask(i)
        count[m] += 1
        V[m] = np.where(V[m] < 0, j, V[m])
    G = V >= 0
    # exact rules on the finest cells: f is polynomial there, so are N_i and Q
    nq = [max(b.k, kk) for b, kk in zip(f.bases, coll.k)]
    rules = [atom_rule(p.edges, q) for p, q in zip(fine, nq)]
    nodes = [r[0] for r in rules]
    fv = f.on_grid(nodes)
    lab = V
    for j, q in enumerate(nq):
        lab = np.repeat(lab, q, axis=j)
    Q, boxes, ratios, ortho = [], [], [], 0.0
    h = np.where(lab < 0, fv, 0.0)
    gsum = np.zeros_like(fv)
    for j, i in enumerate(E):
        n = int(coll.step[i])
        bnd = coll.bounds(i)
        bases = [_local_basis(tf.partition(n, d), lo_, hi_, coll.k[d]) for d, (lo_, hi_) in enumerate(bnd)]
        sl = [slice(coll.lo[i, d] * nq[d], (coll.hi[i, d] + 1) * nq[d]) for d in range(tf.dim)]
        loc = np.where(lab[tuple(sl)] == j, fv[tuple(sl)], 0.0)
        mom = loc
        for d, b in enumerate(bases):
            pts, wts = rules[d][0][sl[d]], rules[d][1][sl[d]]
            W = b.collocation(pts, sparse=True).multiply(wts[:, None]).T.tocsr()
            mom = mode_product(mom, W, d)
        coef = mom
        for d, b in enumerate(bases):
            moved = np.moveaxis(coef, d, 0)
            coef = np.moveaxis(b.solve_gram(moved.reshape(moved.shape[0], -1)).reshape(moved.shape), 0, d)
        q = TensorSpline(bases, coef)
        qv = q.on_grid([nodes[d][sl[d]] for d in range(tf.dim)])
        h[tuple(sl)] += qv
        gj = loc - qv
        gsum[tuple(sl)] += gj
        # g_j is orthogonal to the local spline space
        r = gj
        for d, b in enumerate(bases):
            pts, wts = rules[d][0][sl[d]], rules[d][1][sl[d]]
            W = b.collocation(pts, sparse=True).multiply(wts[:, None]).T.tocsr()
            r = mode_product(r, W, d)
        ortho = max(ortho, float(np.max(np.abs(r))) / max(float(np.max(np.abs(mom))), 1e-300))
        qq = coef
        for d, b in enumerate(bases):
            qq = mode_product(qq, b.gram, d)
        vol = float(np.prod([hi_ - lo_ for lo_, hi_ in bnd]))
        ratios.append(float(np.sum(qq * coef)) / (lam ** 2 * vol))
        Q.append(q)
        boxes.append(bnd)
    w = np.ones(())
    for _, wts in rules:
        w = np.multiply.outer(w, wts)
    scale = max(1.0, float(np.max(np.abs(fv))))
    residual = float(np.max(np.abs(fv - h - gsum))) / scale
    return CZDecomposition(E=[int(i) for i in E], boxes=boxes, steps=[int(coll.step[i]) for i in E],
                           V=V, G=G, Q=Q, overlap=int(count.max(initial=0)),
                           local_ratios=np.array(ratios), h_sq=float(np.sum(w * h * h)),
                           h_sup=float(np.max(np.abs(h))), residual=residual, orthogonality=ortho, **base)


def overlap_ceiling(k: Sequence[int]) -> int:
    return int(np.prod([3 * kk * (3 * kk + 1) // 2 for kk in k]))


# -- Remez ---------------------------------------------------------------------

def monomial_exponents(r: int, d: int) -> np.ndarray:
    """Exponents of all monomials of total degree at most ``r`` in ``d`` variables."""
    return np.array([a for a in product(range(r + 1), repeat=d) if sum(a) <= r], dtype=int)


def eval_poly(exps: np.ndarray, coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    r = int(exps.max(initial=0))
    P = x[:, :, None] ** np.arange(r + 1)
    mono = np.ones((x.shape[0], exps.shape[0]))
    for j in range(x.shape[1]):
        mono *= P[:, j, exps[:, j]]
    return mono @ coeffs


def _bernstein_bound(exps, coeffs, lo, hi) -> float:
    """``max |b|`` over tensor Bernstein coefficients on the box: an upper bound for ``sup |p|``."""
    d = lo.size
    r = int(exps.max(initial=0))
    m = r + 1
    # tensor monomial coefficients in local variables, recovered by interpolation
    t = 0.5 - 0.5 * np.cos(np.pi * (np.arange(m) + 0.5) / m)
    grids = np.meshgrid(*([t] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    vals = eval_poly(exps, coeffs, lo + pts * (hi - lo)).reshape((m,) * d)
    Vinv = np.linalg.inv(np.vander(t, m, increasing=True))
    B = np.array([[math.comb(i, j) / math.comb(r, j) if j <= i else 0.0 for j in range(m)] for i in range(m)])
    M = B @ Vinv
    c = vals
    for j in range(d):
        c = mode_product(c, M, j)
    return float(np.max(np.abs(c)))


def remez_measure(exps, coeffs, lo, hi, r: int, samples: int, rng: np.random.Generator,
                  sup: float | None = None) -> tuple[float, float]:
    """Monte-Carlo fraction of the box where ``|p| >= (8d)^{-r} sup|p|`` and its standard error."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    d = lo.size
    sup = _bernstein_bound(exps, coeffs, lo, hi) if sup is None else sup
    if sup == 0:
        return 1.0, 0.0
    x = lo + rng.random((samples, d)) * (hi - lo)
    frac = float(np.mean(np.abs(eval_poly(exps, coeffs, x)) >= (8 * d) ** (-r) * sup))
    return frac, math.sqrt(max(frac * (1 - frac), 0.25 / samples) / samples)


def remez_measure_1d(coeffs, a: float, b: float, r: int, sup: float | None = None) -> float:
    """Exact measure of ``{x in [a, b] : |p(x)| >= (8)^{-r} sup|p|}`` for a univariate ``p``."""
    p = np.polynomial.Polynomial(coeffs)
    if sup is None:
        crit = p.deriv().roots() if p.degree() > 1 else np.array([])
        crit = crit[np.abs(crit.imag) < 1e-12].real
        cand = np.concatenate([[a, b], crit[(crit > a) & (crit < b)]])
        sup = float(np.max(np.abs(p(cand))))
    thr = 8.0 ** (-r) * sup
    cuts = [a, b]
    for q in (p - thr, p + thr):
        rts = q.roots() if q.degree() > 0 else np.array([])
        rts = rts[np.abs(rts.imag) < 1e-12].real
        cuts += list(rts[(rts > a) & (rts < b)])
    cuts = np.unique(cuts)
    mids = 0.5 * (cuts[1:] + cuts[:-1])
    return float(np.sum(np.diff(cuts)[np.abs(p(mids)) >= thr]))


@dataclass
class RemezReport:
    r: int
    d: int
    trials: int
    samples: int
    violations: int
    min_fraction: float
    min_margin: float  # smallest (fraction - 1/2) / sigma

    def rows(self) -> list[dict]:
        return [{"r": self.r, "d": self.d, "trials": self.trials, "samples": self.samples,
                 "violations": self.violations, "min_fraction": self.min_fraction,
                 "min_margin": self.min_margin}]


def random_polynomial(r: int, d: int, lo: np.ndarray, hi: np.ndarray, rng: np.random.Generator):
    """Gaussian monomial coefficients or a product of ``r`` linear forms vanishing inside the box."""
    exps = monomial_exponents(r, d)
    if r == 0 or rng.random() < 0.5:
        return exps, rng.standard_normal(exps.shape[0])
    index = {tuple(e): i for i, e in enumerate(exps)}
    poly = {(0,) * d: 1.0}
    for _ in range(r):
        w = rng.standard_normal(d)
        z = lo + rng.random(d) * (hi - lo)
        lin = {(0,) * d: -float(w @ z)}
        for j in range(d):
            e = [0] * d
            e[j] = 1
            lin[tuple(e)] = float(w[j])
        new: dict = {}
        for a, ca in poly.items():
            for b, cb in lin.items():
                key = tuple(x + y for x, y in zip(a, b))
                new[key] = new.get(key, 0.0) + ca * cb
        poly = new
    c = np.zeros(exps.shape[0])
    for key, v in poly.items():
        c[index[key]] = v
    return exps, c


def remez_check(r: int, d: int, trials: int, samples: int, rng: np.random.Generator) -> RemezReport:
    """Random polynomials of degree ``<= r`` on random boxes; violations are fractions below ``1/2 - 3 sigma``.

    The sup norm is replaced by the Bernstein-coefficient bound, which can
    only raise the threshold, so a pass is not an artifact of underestimating
    the sup.
    """
    if not (0 <= r <= 6 and 1 <= d <= 3):
        raise ValueError("need r <= 6 and d <= 3")
    viol, worst, margin = 0, 1.0, np.inf
    for _ in range(trials):
        lo = rng.uniform(-2, 1, d)
        hi = lo + rng.uniform(0.1, 2, d)
        deg = int(rng.integers(0, r + 1))
        exps, c = random_polynomial(deg, d, lo, hi, rng)
        frac, sigma = remez_measure(exps, c, lo, hi, deg, samples, rng)
        worst = min(worst, frac)
        margin = min(margin, (frac - 0.5) / sigma)
        if frac < 0.5 - 3 * sigma:
            viol += 1
    return RemezReport(r, d, trials, samples, viol, worst, float(margin))

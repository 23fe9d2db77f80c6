"""Regularity parameters of interval filtrations, dyadic extensions and example families.

Both analyzers accept a :class:`TensorFiltration` or any nested sequence of
partition tuples (one :class:`Partition1D` per direction and stage), so they
also apply to the rearranged sequence, where stages repeat.

Supports of order ``r`` follow the clamped-knot convention: a run of ``c``
consecutive atoms is a support if ``c == r``, or if ``c < r`` and the run
touches an end of the interval (a partition with at most ``r`` atoms has the
whole interval as a support).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .partition import Filtration1D, Partition1D, TensorFiltration

Stages = Sequence[Sequence[Partition1D]]


def _stages(source) -> list[tuple[Partition1D, ...]]:
    if isinstance(source, TensorFiltration):
        return [source.partitions(n) for n in range(source.n_steps + 1)]
    if isinstance(source, Filtration1D):
        return [(p,) for p in source.partitions]
    return [tuple(s) for s in source]


def support_ranges(n_atoms: int, r: int) -> list[tuple[int, int]]:
    """Inclusive atom ranges of the distinct B-spline supports of order ``r``."""
    out = []
    for i in range(n_atoms + r - 1):
        rng = (max(i - r + 1, 0), min(i, n_atoms - 1))
        if not out or out[-1] != rng:
            out.append(rng)
    return out


def is_support(partition: Partition1D, lo: float, hi: float, r: int) -> bool:
    """Whether ``[lo, hi)`` is the support of an order-``r`` B-spline on ``partition``."""
    e = partition.edges
    i, j = np.searchsorted(e, [lo, hi])
    if i >= e.size or j >= e.size or e[i] != lo or e[j] != hi or j <= i:
        return False
    c = j - i
    if c == r:
        return True
    return c < r and (i == 0 or j == e.size - 1)


# -- gamma -----------------------------------------------------------------

@dataclass
class GammaWitness:
    direction: int
    stage: int
    A: tuple[float, float]
    B: tuple[float, float]
    ratio: float


def _partition_gamma(p: Partition1D, r: int) -> tuple[float, tuple, tuple]:
    e = p.edges
    sup = support_ranges(p.n_atoms, r)
    lo = np.array([e[a] for a, _ in sup])
    hi = np.array([e[b + 1] for _, b in sup])
    ln = hi - lo
    best, wa, wb = 1.0, (lo[0], hi[0]), (lo[0], hi[0])
    # supports are ordered left to right; those within r positions cover every touching pair
    for off in range(1, min(len(sup), r + 2)):
        touch = lo[off:] <= hi[:-off]
        if not np.any(touch):
            continue
        ratio = np.maximum(ln[off:] / ln[:-off], ln[:-off] / ln[off:])
        ratio = np.where(touch, ratio, 0.0)
        i = int(np.argmax(ratio))
        if ratio[i] > best:
            best = float(ratio[i])
            wa, wb = (lo[i], hi[i]), (lo[i + off], hi[i + off])
    return best, (float(wa[0]), float(wa[1])), (float(wb[0]), float(wb[1]))


def regularity_parameter(source, r: Sequence[int] | int, start: int = 0
                         ) -> tuple[list[float], list[GammaWitness]]:
    """Per-direction ``gamma``: the largest length ratio of touching order-``r`` supports.

    Stages before ``start`` are ignored. Returns ``(gammas, witnesses)``.
    """
    stages = _stages(source)[start:]
    d = len(stages[0])
    r = [r] * d if isinstance(r, int) else list(r)
    gammas, wits = [], []
    for j in range(d):
        best = GammaWitness(j, start, (0.0, 0.0), (0.0, 0.0), 1.0)
        seen = set()
        for n, st in enumerate(stages):
            p = st[j]
            if p.breakpoints in seen:
                continue
            seen.add(p.breakpoints)
            g, a, b = _partition_gamma(p, r[j])
            if g > best.ratio:
                best = GammaWitness(j, n + start, a, b, g)
        gammas.append(best.ratio)
        wits.append(best)
    return gammas, wits


# -- beta ------------------------------------------------------------------

@dataclass
class BetaWitness:
    direction: int
    B: tuple[float, float]
    window: tuple[int, int]
    chain: list[tuple[int, tuple[tuple[float, float], ...]]] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.chain)


class _SplitHistory:
    """Birth stage of every breakpoint of one direction."""

    def __init__(self, stages: list[Partition1D]):
        self.left, self.right = stages[0].left, stages[0].right
        birth: dict[float, int] = {}
        for n, p in enumerate(stages):
            for x in p.breakpoints:
                birth.setdefault(x, n)
        self.points = np.array(sorted(birth))
        self.birth = np.array([birth[x] for x in self.points], dtype=int)
        self.stages = stages
        self._path = lru_cache(maxsize=None)(self._deepest)

    def _deepest(self, x0: float, x1: float, s: int, e: int) -> tuple:
        """Deepest chain of splits of ``[x0, x1)`` during stages ``(s, e]``: ``((t, lo, hi), ...)``."""
        i = np.searchsorted(self.points, x0, side="right")
        j = np.searchsorted(self.points, x1, side="left")
        b = self.birth[i:j]
        live = (b > s) & (b <= e)
        if not np.any(live):
            return ()
        t = int(b[live].min())
        cuts = self.points[i:j][b == t]
        edges = np.concatenate([[x0], cuts, [x1]])
        best: tuple = ()
        for lo, hi in zip(edges[:-1], edges[1:]):
            sub = ((t, float(lo), float(hi)),) + self._path(float(lo), float(hi), t, e)
            if len(sub) > len(best):
                best = sub
        return best

    def deepest(self, x0, x1, s, e):
        return self._path(float(x0), float(x1), int(s), int(e))

    def deepest_in(self, lo: float, hi: float, s: int, e: int) -> tuple[tuple[float, float], tuple]:
        """Over atoms of stage ``s`` inside ``[lo, hi]``: the start atom and its deepest chain."""
        edges = self.stages[s].edges
        inside = edges[(edges >= lo) & (edges <= hi)]
        best = ((float(inside[0]), float(inside[1])), ())
        for a, b in zip(inside[:-1], inside[1:]):
            path = self.deepest(a, b, s, e)
            if len(path) > len(best[1]):
                best = ((float(a), float(b)), path)
        return best


def direction_regularity_parameter(source, r: Sequence[int] | int, cap: int = 12,
                                   start: int = 0) -> tuple[int | str, BetaWitness | None]:
    """Smallest ``beta`` admitting no violating chain, or ``"cap_exceeded"``.

    A violating chain of length ``L`` is a strictly decreasing sequence of
    atoms ``A_1 > ... > A_L`` from stages ``n_1 < ... < n_L`` together with an
    order-``r`` support ``B`` in direction ``delta`` at stage ``n_1`` that
    contains ``A_1^delta`` and is still a support at ``n_L``. Supports only
    gain atoms over time, so ``B`` remains a support during one window of
    stages. Within that window the longest chain descends independently in
    each direction along the deepest split path (inside ``B`` for
    ``delta``), which gives the maximal ``L`` exactly; ``beta = L + 1``.
    """
    if cap < 2:
        raise ValueError("cap must be at least 2")
    stages = _stages(source)[start:]
    d = len(stages[0])
    r = [r] * d if isinstance(r, int) else list(r)
    hist = [_SplitHistory([st[j] for st in stages]) for j in range(d)]
    best_len, best = 0, None
    for delta in range(d):
        windows: dict[tuple[float, float], list[int]] = {}
        for n, st in enumerate(stages):
            e = st[delta].edges
            for a, b in support_ranges(st[delta].n_atoms, r[delta]):
                key = (float(e[a]), float(e[b + 1]))
                w = windows.setdefault(key, [n, n])
                w[1] = n
        for B, (s, e) in windows.items():
            chains = {}
            length = 1
            for j in range(d):
                lo, hi = B if j == delta else (hist[j].left, hist[j].right)
                atom, path = hist[j].deepest_in(lo, hi, s, e)
                chains[j] = (atom, path)
                length += len(path)
            if length > best_len:
                best_len = length
                best = BetaWitness(delta, B, (s + start, e + start), _merge_chain(chains, s + start, start))
    if best_len >= cap:
        return "cap_exceeded", best
    return best_len + 1, best


def _merge_chain(chains: dict, s: int, offset: int) -> list:
    box = {j: chains[j][0] for j in chains}
    out = [(s, tuple(box[j] for j in sorted(box)))]
    events = sorted((t, j, lo, hi) for j, (_, path) in chains.items() for t, lo, hi in path)
    for t, j, lo, hi in events:
        box[j] = (lo, hi)
        out.append((t + offset, tuple(box[i] for i in sorted(box))))
    return out


def verify_chain(source, witness: BetaWitness, r: Sequence[int] | int) -> bool:
    """Replay a witness: atoms at their stages, strictly decreasing, ``B`` persisting."""
    stages = _stages(source)
    d = len(stages[0])
    r = [r] * d if isinstance(r, int) else list(r)
    prev = None
    last = witness.chain[0][0]
    for n, box in witness.chain:
        for j, (lo, hi) in enumerate(box):
            e = stages[n][j].edges
            i = np.searchsorted(e, lo)
            if i + 1 >= e.size or e[i] != lo or e[i + 1] != hi:
                return False
        if prev is not None:
            pn, pbox = prev
            if n <= pn or pbox == box or any(not (pl <= lo and hi <= ph)
                                              for (pl, ph), (lo, hi) in zip(pbox, box)):
                return False
        prev = (n, box)
        last = n
    first_n, first_box = witness.chain[0]
    B, delta = witness.B, witness.direction
    lo, hi = first_box[delta]
    return (B[0] <= lo and hi <= B[1]
            and is_support(stages[first_n][delta], *B, r[delta])
            and is_support(stages[last][delta], *B, r[delta]))


# -- generators --------------------------------------------------------------

def dyadic_extension(base: TensorFiltration | Sequence[Partition1D], levels: int,
                     rule: str | Callable[[float, float], float] = "midpoint") -> TensorFiltration:
    """Quasi-dyadic extension: every atom split once per level, directions round-robin.

    Level ``v`` is completed in direction 0, then 1, and so on, so per-
    direction level counts never differ by more than one. Within a level
    the atoms are split left to right. ``rule`` gives the split point of
    ``[a, b)``; ``"midpoint"`` yields the dyadic extension. A
    :class:`TensorFiltration` base keeps its own steps in front.
    """
    if levels < 1:
        raise ValueError("levels must be at least 1")
    parts = base.partitions(base.n_steps) if isinstance(base, TensorFiltration) else tuple(base)
    split = (lambda a, b: 0.5 * (a + b)) if rule == "midpoint" else rule
    if not callable(split):
        raise ValueError(f"unknown split rule {rule!r}")
    if isinstance(base, TensorFiltration):
        tf = base
    else:
        tf = TensorFiltration(tuple(Filtration1D(p) for p in parts))
    steps = []
    cur = list(parts)
    for _ in range(levels):
        for j in range(len(cur)):
            p = cur[j]
            for i in range(p.n_atoms):
                a, b = p.atom(i)
                x = float(split(a, b))
                if not a < x < b:
                    raise ValueError(f"split point {x} outside atom [{a}, {b})")
                steps.append((j, 2 * i, x))
            cur[j] = Partition1D(p.left, p.right, tuple(sorted(p.breakpoints + tuple(
                s[2] for s in steps[-p.n_atoms:]))))
    return tf.extend(steps)


def random_quasi_dyadic(rng: np.random.Generator, dim: int, levels: int,
                        spread: float = 0.25) -> TensorFiltration:
    """Quasi-dyadic extension of the unit cube with split fractions uniform in ``[spread, 1 - spread]``."""
    base = [Partition1D(0.0, 1.0)] * dim
    return dyadic_extension(base, levels, lambda a, b: a + (b - a) * rng.uniform(spread, 1 - spread))


def example_partition(ell: int, m: int) -> Partition1D:
    """``[-1, 1)`` split into ``[-1, -eps)``, ``m`` equal atoms of ``[-eps, eps)`` and ``[eps, 1)``."""
    if ell < 2 or m < 1:
        raise ValueError("need ell >= 2 and m >= 1")
    eps = 1.0 / ell
    inner = [-eps + 2.0 * j * eps / m for j in range(m + 1)]
    return Partition1D(-1.0, 1.0, tuple(inner))


_EXAMPLE_FRACTIONS = tuple(sorted({j / n for n in range(2, 21) for j in range(1, n)}))


def make_example_filtration(ell: int, k: int, m: int | None = None,
                            fractions: Sequence[float] = _EXAMPLE_FRACTIONS) -> Filtration1D:
    """The example family: ``F(1/ell)`` followed by refinements of the two outer intervals.

    ``floor(|ln eps|)`` rounds are made; each splits one atom left of
    ``-eps`` and its mirror image right of ``eps``. The left split is picked
    greedily over the outer atoms and the relative positions ``fractions``:
    splits keeping the order-``k`` regularity parameter of both new stages
    below 2 come first, among those the largest order-``m`` parameter
    wins, then the smallest order-``k`` one; remaining ties go to the atom
    closest to the middle. Without such a split the order-``k`` parameter
    is minimised.
    """
    m = k - 1 if m is None else m
    base = example_partition(ell, m)
    eps = 1.0 / ell
    f = Filtration1D(base)
    for _ in range(int(math.floor(abs(math.log(eps))))):
        p = f.partitions[-1]
        best = None
        for i in range(p.n_atoms):
            a, b = p.atom(i)
            if b > -eps:
                break
            for t in fractions:
                x = a + t * (b - a)
                q = p.refine(i, x)
                qq = q.refine(q.atom_of(-x), -x)
                g = max(_partition_gamma(q, k)[0], _partition_gamma(qq, k)[0])
                low = _partition_gamma(qq, m)[0] if m >= 1 else 1.0
                feasible = g < 2
                key = (not feasible, 0.0 if feasible else g, -round(low, 12), round(g, 12), -i)
                if best is None or key < best[0]:
                    best = (key, i, x)
        _, i, x = best
        f = f.append(i, x)
        f = f.split_at(-x)
    return f


def example_from_trivial(ell: int, k: int, m: int | None = None) -> Filtration1D:
    """The same family built by single splits starting from the trivial sigma-algebra."""
    target = make_example_filtration(ell, k, m)
    f = Filtration1D(Partition1D(-1.0, 1.0))
    for x in target.base.breakpoints:
        f = f.split_at(x)
    for st in target.steps:
        f = f.split_at(st.x)
    return f


# -- lemma audits -----------------------------------------------------------

def validate_lemma_dir(source, k: Sequence[int], m: Sequence[int], i: int, cap: int = 12) -> dict:
    """Check that direction ``m``-regularity passes to ``m - e_i`` when ``m_i > k_i``."""
    k, m = list(k), list(m)
    report = {"k": k, "m": m, "i": i}
    if m[i] <= k[i]:
        return {**report, "skipped": f"m_{i} = {m[i]} does not exceed k_{i} = {k[i]}"}
    if any(mm < kk for mm, kk in zip(m, k)):
        return {**report, "skipped": "m is not componentwise at least k"}
    gam, _ = regularity_parameter(source, k)
    beta, _ = direction_regularity_parameter(source, m, cap)
    if beta == "cap_exceeded":
        return {**report, "gamma": max(gam), "skipped": "not direction m-regular below the cap"}
    mp = list(m)
    mp[i] -= 1
    beta_p, _ = direction_regularity_parameter(source, mp, cap)
    return {**report, "gamma": max(gam), "beta": beta, "beta_prime": beta_p,
            "finite": beta_p != "cap_exceeded"}


def lemma_comb_audit(system, max_shift: int | None = None) -> dict:
    """Longest chains of the combinatorial lemma, by dynamic programming over function indices.

    For each shift ``s`` and direction ``delta`` with ``|s_delta| > k_delta``
    the candidate set of function ``l`` is the atom ``C_l`` of its sigma-
    algebra at offset ``s`` from ``J_l``. A chain needs decreasing ``C_l``
    and decreasing ``J_l^delta``. Reports the largest
    ``card / sum_{j != delta} (1 + |s_j|)``.
    """
    tf = system.filtration
    steps = system.sigma_steps()
    L = steps.size
    d = tf.dim
    J = np.concatenate([blk.char_atoms() for blk in system.blocks])
    edges = [[tf.partition(int(n), j).edges for n in range(system.n_blocks)] for j in range(d)]
    jlo = np.array([[edges[j][steps[l]][J[l, j]] for j in range(d)] for l in range(L)])
    jhi = np.array([[edges[j][steps[l]][J[l, j] + 1] for j in range(d)] for l in range(L)])
    natoms = np.array([[len(edges[j][steps[l]]) - 1 for j in range(d)] for l in range(L)])
    top = int(natoms.max()) - 1 if max_shift is None else max_shift
    best = {"ratio": 0.0, "card": 0, "s": None, "delta": None, "chains_found": 0}
    for delta in range(d):
        jd_ok = (jlo[:, None, delta] <= jlo[None, :, delta]) & (jhi[None, :, delta] <= jhi[:, None, delta])
        for s in np.ndindex(*([2 * top + 1] * d)):
            s = np.array(s) - top
            if abs(s[delta]) <= system.k[delta]:
                continue
            idx = J + s
            valid = np.all((idx >= 0) & (idx < natoms), axis=1)
            if not np.any(valid):
                continue
            clo = np.zeros((L, d))
            chi = np.zeros((L, d))
            for l in np.nonzero(valid)[0]:
                for j in range(d):
                    e = edges[j][steps[l]]
                    clo[l, j], chi[l, j] = e[idx[l, j]], e[idx[l, j] + 1]
            nest = np.all((clo[:, None, :] <= clo[None, :, :]) & (chi[None, :, :] <= chi[:, None, :]), axis=2)
            ok = nest & jd_ok & valid[:, None] & valid[None, :]
            chain = np.where(valid, 1, 0)
            for l in range(L):
                if valid[l]:
                    prev = chain[:l][ok[:l, l]]
                    if prev.size:
                        chain[l] = 1 + prev.max()
            card = int(chain.max())
            if card:
                best["chains_found"] += 1
            denom = sum(1 + abs(int(s[j])) for j in range(d) if j != delta) or 1
            if card / denom > best["ratio"]:
                best.update(ratio=card / denom, card=card, s=[int(x) for x in s], delta=delta)
    return best

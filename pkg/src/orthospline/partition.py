"""Interval partitions, one-dimensional filtrations and their tensor products.

Atoms are half-open intervals ``[a, b)`` indexed left to right from 0; the
last atom of a partition is closed on the right so that every point of the
closed interval belongs to exactly one atom.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1
MIN_ATOM_FRACTION = 1e-12


class InvalidSplitError(ValueError):
    pass


class OutOfDomainError(ValueError):
    pass


@dataclass(frozen=True)
class Partition1D:
    """Partition of ``[left, right]`` by strictly increasing interior breakpoints."""

    left: float
    right: float
    breakpoints: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.left < self.right:
            raise ValueError(f"empty interval [{self.left}, {self.right}]")
        bp = tuple(float(x) for x in self.breakpoints)
        object.__setattr__(self, "breakpoints", bp)
        edges = (self.left, *bp, self.right)
        floor = MIN_ATOM_FRACTION * (self.right - self.left)
        for a, b in zip(edges[:-1], edges[1:]):
            if not b - a > floor:
                raise ValueError(f"atom [{a}, {b}) is degenerate")

    @cached_property
    def edges(self) -> np.ndarray:
        return np.array((self.left, *self.breakpoints, self.right))

    @property
    def n_atoms(self) -> int:
        return len(self.breakpoints) + 1

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def length(self) -> float:
        return self.right - self.left

    def atom(self, i: int) -> tuple[float, float]:
        if not 0 <= i < self.n_atoms:
            raise IndexError(f"atom {i} out of range for {self.n_atoms} atoms")
        return float(self.edges[i]), float(self.edges[i + 1])

    def refine(self, atom: int, x: float) -> "Partition1D":
        """Split atom ``atom`` at the interior point ``x``."""
        a, b = self.atom(atom)
        if not a < x < b:
            raise InvalidSplitError(f"split point {x} not inside atom [{a}, {b})")
        bp = list(self.breakpoints)
        bp.insert(atom, float(x))
        try:
            return Partition1D(self.left, self.right, tuple(bp))
        except ValueError as exc:
            raise InvalidSplitError(str(exc)) from exc

    def atom_of(self, x):
        """Index of the atom containing ``x`` (scalar or array)."""
        xs = np.asarray(x, dtype=float)
        if np.any((xs < self.left) | (xs > self.right)) or np.any(np.isnan(xs)):
            raise OutOfDomainError(f"point outside [{self.left}, {self.right}]")
        idx = np.searchsorted(self.edges, xs, side="right") - 1
        idx = np.minimum(idx, self.n_atoms - 1)
        return int(idx) if idx.ndim == 0 else idx

    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def is_refinement_of(self, other: "Partition1D") -> bool:
        if (self.left, self.right) != (other.left, other.right):
            return False
        return set(other.breakpoints) <= set(self.breakpoints)


@dataclass(frozen=True)
class Split:
    """One standard-form step: atom ``atom`` of the previous partition split at ``x``."""

    atom: int
    x: float


@dataclass(frozen=True)
class Filtration1D:
    base: Partition1D
    steps: tuple[Split, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(
            s if isinstance(s, Split) else Split(int(s[0]), float(s[1])) for s in self.steps))
        # validates every stage
        _ = self.partitions

    @cached_property
    def partitions(self) -> tuple[Partition1D, ...]:
        out = [self.base]
        for s in self.steps:
            out.append(out[-1].refine(s.atom, s.x))
        return tuple(out)

    def __len__(self):
        return len(self.steps)

    def partition(self, step: int) -> Partition1D:
        return self.partitions[step]

    def split_atoms(self, step: int) -> tuple[int, int]:
        """Indices ``(L, R)`` of the two atoms created at ``step`` (1-based)."""
        if step < 1:
            raise ValueError("step 0 has no split")
        a = self.steps[step - 1].atom
        return a, a + 1

    def append(self, atom: int, x: float) -> "Filtration1D":
        return Filtration1D(self.base, self.steps + (Split(atom, x),))

    def split_at(self, x: float) -> "Filtration1D":
        p = self.partitions[-1]
        return self.append(p.atom_of(x), x)


@dataclass(frozen=True)
class StepInfo:
    direction: int
    factor_step: int
    atom: int
    x: float


@dataclass(frozen=True)
class TensorFiltration:
    """Product filtration in standard form.

    ``schedule[n - 1]`` is the direction refined at global step ``n``; the
    directions' own split sequences are consumed in order.
    """

    factors: tuple[Filtration1D, ...]
    schedule: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "schedule", tuple(int(s) for s in self.schedule))
        counts = [0] * self.dim
        for s in self.schedule:
            if not 0 <= s < self.dim:
                raise ValueError(f"direction {s} out of range")
            counts[s] += 1
        for c, f in zip(counts, self.factors):
            if c != len(f):
                raise ValueError("schedule does not consume every factor step exactly once")

    @property
    def dim(self) -> int:
        return len(self.factors)

    @property
    def n_steps(self) -> int:
        return len(self.schedule)

    @cached_property
    def factor_counts(self) -> np.ndarray:
        """``counts[n, d]`` = number of factor-``d`` splits done after global step ``n``."""
        out = np.zeros((self.n_steps + 1, self.dim), dtype=int)
        for n, s in enumerate(self.schedule, start=1):
            out[n] = out[n - 1]
            out[n, s] += 1
        return out

    @property
    def trivial_start(self) -> bool:
        return all(f.base.n_atoms == 1 for f in self.factors)

    @property
    def domain(self) -> tuple[tuple[float, float], ...]:
        return tuple((f.base.left, f.base.right) for f in self.factors)

    def volume(self) -> float:
        return float(np.prod([b - a for a, b in self.domain]))

    def partition(self, n: int, direction: int) -> Partition1D:
        self._check_step(n)
        return self.factors[direction].partitions[self.factor_counts[n, direction]]

    def partitions(self, n: int) -> tuple[Partition1D, ...]:
        return tuple(self.partition(n, d) for d in range(self.dim))

    def shape(self, n: int) -> tuple[int, ...]:
        return tuple(p.n_atoms for p in self.partitions(n))

    def n_atoms(self, n: int) -> int:
        return int(np.prod(self.shape(n)))

    def step_info(self, n: int) -> StepInfo:
        if not 1 <= n <= self.n_steps:
            raise ValueError(f"step {n} has no split")
        d = self.schedule[n - 1]
        fs = int(self.factor_counts[n, d])
        s = self.factors[d].steps[fs - 1]
        return StepInfo(d, fs, s.atom, s.x)

    def atom_of(self, n: int, x) -> tuple[int, ...]:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.dim:
            raise ValueError(f"point must have {self.dim} coordinates")
        return tuple(int(p.atom_of(x[..., d])) for d, p in enumerate(self.partitions(n)))

    def atom_box(self, n: int, atom: Sequence[int]) -> tuple[tuple[float, float], ...]:
        return tuple(p.atom(i) for p, i in zip(self.partitions(n), atom))

    def _check_step(self, n):
        if not 0 <= n <= self.n_steps:
            raise IndexError(f"step {n} outside 0..{self.n_steps}")

    def prefix(self, n: int) -> "TensorFiltration":
        """The filtration truncated after global step ``n``."""
        self._check_step(n)
        c = self.factor_counts[n]
        factors = tuple(Filtration1D(f.base, f.steps[:c[d]]) for d, f in enumerate(self.factors))
        return TensorFiltration(factors, self.schedule[:n])

    def extend(self, steps: Sequence[tuple[int, int, float]]) -> "TensorFiltration":
        """Append ``(direction, atom, x)`` steps, ``atom`` indexed in the current factor partition."""
        factors = list(self.factors)
        schedule = list(self.schedule)
        for d, atom, x in steps:
            factors[d] = factors[d].append(int(atom), float(x))
            schedule.append(int(d))
        return TensorFiltration(tuple(factors), tuple(schedule))

    # serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        cursor = [0] * self.dim
        sched = []
        for d in self.schedule:
            s = self.factors[d].steps[cursor[d]]
            cursor[d] += 1
            sched.append({"dir": d, "atom": s.atom, "x": s.x})
        out = {
            "format_version": FORMAT_VERSION,
            "dim": self.dim,
            "intervals": [[f.base.left, f.base.right] for f in self.factors],
            "schedule": sched,
        }
        if not self.trivial_start:
            out["base_breakpoints"] = [list(f.base.breakpoints) for f in self.factors]
        return out

    def to_json(self) -> str:
        # repr-based float formatting round-trips binary64 exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "TensorFiltration":
        dim = int(data["dim"])
        intervals = data["intervals"]
        if len(intervals) != dim:
            raise ValueError("intervals must list one [a, b] pair per direction")
        bases = data.get("base_breakpoints") or [[] for _ in range(dim)]
        out = cls(tuple(Filtration1D(Partition1D(float(a), float(b), tuple(bp)))
                        for (a, b), bp in zip(intervals, bases)))
        return out.extend([(int(s["dir"]), int(s["atom"]), float(s["x"])) for s in data["schedule"]])

    @classmethod
    def from_json(cls, text: str) -> "TensorFiltration":
        return cls.from_dict(json.loads(text))

    @classmethod
    def trivial(cls, intervals: Sequence[tuple[float, float]]) -> "TensorFiltration":
        return cls(tuple(Filtration1D(Partition1D(float(a), float(b))) for a, b in intervals))

    @classmethod
    def from_filtration1d(cls, f: Filtration1D) -> "TensorFiltration":
        return cls((f,), (0,) * len(f))


def atom_distance(a: Sequence[int], b: Sequence[int], step_a: int | None = None,
                  step_b: int | None = None) -> np.ndarray:
    """Signed componentwise index difference ``b - a`` of two atoms of the same step."""
    if step_a is not None and step_b is not None and step_a != step_b:
        raise ValueError(f"atoms belong to different steps {step_a} and {step_b}")
    a = np.atleast_1d(np.asarray(a, dtype=int))
    b = np.atleast_1d(np.asarray(b, dtype=int))
    if a.shape != b.shape:
        raise ValueError("atoms have different dimensions")
    return b - a


def random_filtration(rng: np.random.Generator, dim: int, n_steps: int,
                      intervals: Sequence[tuple[float, float]] | None = None,
                      min_fraction: float = 0.05) -> TensorFiltration:
    """Random standard-form filtration starting from the trivial sigma-algebra.

    Each step picks a direction and an atom uniformly and splits it at a
    uniformly drawn relative position in ``[min_fraction, 1 - min_fraction]``.
    """
    if intervals is None:
        intervals = [(0.0, 1.0)] * dim
    tf = TensorFiltration.trivial(intervals)
    factors = list(tf.factors)
    schedule = []
    for _ in range(n_steps):
        d = int(rng.integers(dim))
        p = factors[d].partitions[-1]
        i = int(rng.integers(p.n_atoms))
        a, b = p.atom(i)
        t = rng.uniform(min_fraction, 1 - min_fraction)
        factors[d] = factors[d].append(i, a + t * (b - a))
        schedule.append(d)
    return TensorFiltration(tuple(factors), tuple(schedule))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from orthospline.bspline import (BSplineBasis, IncompatibleBasesError, Spline, TensorSpline,
                                  build_basis, inner_product, l1_norms, local_monomials, lp_norm)
from orthospline.partition import Partition1D

import oracles
from strategies import partitions


def random_partition(rng, n, a=0.0, b=1.0):
    return Partition1D(a, b, tuple(np.sort(rng.uniform(a, b, n - 1))))


def test_order_one_is_indicators():
    p = Partition1D(0.0, 1.0, (0.2, 0.7))
    b = build_basis(p, 1)
    assert b.dim == 3
    x = np.array([0.1, 0.2, 0.5, 0.9, 1.0])
    C = b.collocation(x)
    assert np.array_equal(C, np.eye(3)[p.atom_of(x)])


def test_hat_functions():
    b = build_basis(Partition1D(0.0, 1.0, (0.5,)), 2)
    assert b.dim == 3
    assert np.array_equal(b.knots, [0, 0, 0.5, 1, 1])
    assert b.eval(1, 0.5) == pytest.approx(1.0)
    assert b.eval(1, 0.25) == pytest.approx(0.5)
    assert b.eval(0, 0.75) == 0.0


def test_order_four_against_scipy(rng):
    p = random_partition(rng, 5)
    b = build_basis(p, 4)
    assert b.dim == 8
    x = rng.uniform(0, 1, 100)
    C = b.collocation(x)
    assert np.abs(C.sum(axis=1) - 1).max() <= 1e-12
    assert np.abs(C - oracles.design(p.edges, 4, x)).max() <= 1e-12


@given(partitions(max_atoms=50), st.integers(1, 5))
def test_partition_of_unity_and_scipy(p, k):
    b = build_basis(p, k)
    x = np.random.default_rng(0).uniform(0, 1, 1000)
    C = b.collocation(x)
    assert np.abs(C.sum(axis=1) - 1).max() <= 1e-12
    assert C.min() >= -1e-15 and C.max() <= 1 + 1e-12
    assert np.abs(C - oracles.design(p.edges, k, x)).max() <= 1e-12


def test_eval_index_out_of_range():
    b = build_basis(Partition1D(0.0, 1.0), 2)
    with pytest.raises(IndexError):
        b.eval(2, 0.5)


def test_support_and_largest_atom():
    p = Partition1D(0.0, 1.0, (0.25, 0.5, 0.75))
    b1 = build_basis(p, 1)
    for i in range(4):
        (lo, hi), K = b1.support(i)
        assert (lo, hi) == p.atom(i) and K == i
    b3 = build_basis(p, 3)
    (lo, hi), K = b3.support(3)
    assert (lo, hi) == (0.25, 1.0)
    assert K == 1  # three equal atoms tie: leftmost wins


@given(partitions(), st.integers(1, 4))
def test_support_is_where_nonzero(p, k):
    b = build_basis(p, k)
    x = np.linspace(0, 1, 257)
    C = b.collocation(x)
    for i in range(b.dim):
        (lo, hi), K = b.support(i)
        outside = (x < lo) | (x > hi)
        assert np.all(C[outside, i] == 0)
        alo, ahi = b.support_atoms(i)
        assert ahi - alo + 1 <= k
        assert p.lengths[K] == p.lengths[alo:ahi + 1].max()


def test_gram_against_scipy_and_symbolic(rng):
    for k in [1, 2, 3, 4]:
        p = random_partition(rng, 12)
        b = build_basis(p, k)
        assert np.abs(b.gram - oracles.gram(p.edges, k)).max() <= 1e-14
    h = 0.125
    b = build_basis(Partition1D(0.0, 1.0, tuple(np.arange(1, 8) * h)), 2)
    G = b.gram
    assert np.allclose(np.diag(G)[1:-1], 2 * h / 3, rtol=0, atol=1e-15)
    assert np.allclose(np.diag(G, 1), h / 6, rtol=0, atol=1e-15)
    assert G[0, 3] == 0


def test_inner_products(rng):
    p = random_partition(rng, 6)
    b = build_basis(p, 1)
    for i in range(b.dim):
        e = np.eye(b.dim)[i]
        assert inner_product(Spline(b, e), Spline(b, e)) == pytest.approx(p.lengths[i], rel=1e-14)
    b3 = build_basis(p, 3)
    s = Spline(b3, np.eye(b3.dim)[0])
    t = Spline(b3, np.eye(b3.dim)[-1])
    assert inner_product(s, t) == 0.0


def test_inner_product_incompatible():
    s = Spline(build_basis(Partition1D(0.0, 1.0), 2), np.ones(2))
    t = Spline(build_basis(Partition1D(0.0, 2.0), 2), np.ones(2))
    with pytest.raises(IncompatibleBasesError):
        inner_product(s, t)


@pytest.mark.parametrize("p", [1, 1.5, 2, 3, np.inf])
def test_lp_norm_constant(p):
    b = build_basis(Partition1D(-1.0, 2.0, (0.3, 1.1)), 3)
    s = Spline(b, np.full(b.dim, -2.5))
    expect = 2.5 if np.isinf(p) else 2.5 * 3.0 ** (1 / p)
    assert lp_norm(s, p) == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("p", [1, 2, 3.5])
def test_lp_norm_indicators(rng, p):
    part = random_partition(rng, 7)
    b = build_basis(part, 1)
    a = rng.standard_normal(b.dim)
    expect = np.sum(np.abs(a) ** p * part.lengths) ** (1 / p)
    assert lp_norm(Spline(b, a), p) == pytest.approx(expect, rel=1e-12)


def test_lp_norm_against_riemann(rng):
    part = random_partition(rng, 8)
    b = build_basis(part, 3)
    s = Spline(b, rng.standard_normal(b.dim))
    n = 10**6
    x = (np.arange(n) + 0.5) / n
    v = s(x)
    for p in [1, 2, 3]:
        riemann = np.mean(np.abs(v) ** p) ** (1 / p)
        assert lp_norm(s, p) == pytest.approx(riemann, abs=1e-8)
    assert lp_norm(s, np.inf) >= np.abs(v).max() - 1e-14
    assert lp_norm(s, np.inf) == pytest.approx(np.abs(v).max(), abs=1e-6)
    with pytest.raises(ValueError):
        lp_norm(s, 0.5)


def test_batched_l1_norms(rng):
    part = random_partition(rng, 10)
    for k in [1, 2, 4]:
        b = build_basis(part, k)
        C = rng.standard_normal((5, b.dim))
        got = l1_norms(b, C)
        ref = [lp_norm(Spline(b, c), 1) for c in C]
        assert np.allclose(got, ref, rtol=1e-10)


def test_local_monomials_reproduce_values(rng):
    part = random_partition(rng, 6)
    b = build_basis(part, 4)
    c = rng.standard_normal(b.dim)
    P = local_monomials(b, c)[0]
    e = part.edges
    for a in range(part.n_atoms):
        t = rng.uniform(0, 1, 5)
        x = e[a] + t * (e[a + 1] - e[a])
        assert np.allclose(np.polynomial.polynomial.polyval(t, P[a]), Spline(b, c)(x), atol=1e-12)


@given(partitions(max_atoms=20), st.integers(1, 5), st.floats(0.001, 0.999))
def test_knot_insertion_reproduces(p, k, t):
    b = build_basis(p, k)
    a = p.atom_of(t)
    lo, hi = p.atom(a)
    x = lo + 0.5 * (hi - lo)
    fine, T, _ = b.insert_knot(x)
    c = np.random.default_rng(1).standard_normal(b.dim)
    xs = np.linspace(0, 1, 101)
    assert np.abs(Spline(fine, T @ c)(xs) - Spline(b, c)(xs)).max() <= 1e-12
    assert fine.partition.n_atoms == p.n_atoms + 1


def test_refine_to_incompatible():
    b = build_basis(Partition1D(0.0, 1.0, (0.5,)), 2)
    with pytest.raises(IncompatibleBasesError):
        Spline(b, np.ones(3)).refine_to(build_basis(Partition1D(0.0, 1.0, (0.25,)), 2))


def test_local_stability_constant_does_not_grow(rng):
    """``|a_j| <= C |K_j|^{-1/p} ||g||_{L^p(K_j)}`` with C independent of the atom count."""
    def worst(n, k, p):
        out = 0.0
        for _ in range(25):
            part = random_partition(rng, n)
            b = build_basis(part, k)
            a = rng.standard_normal(b.dim)
            s = Spline(b, a)
            for j in range(b.dim):
                _, K = b.support(j)
                lo, hi = part.atom(K)
                x, w = oracles.gauss([lo, hi], 2 * k)
                loc = np.sum(w * np.abs(s(x)) ** p) ** (1 / p)
                out = max(out, abs(a[j]) * (hi - lo) ** (1 / p) / loc)
        return out
    for k in [2, 3]:
        small, large = worst(10, k, 2), worst(40, k, 2)
        assert np.isfinite(small) and large <= 2 * small + 1


def test_global_stability_two_sided(rng):
    for k in [1, 2, 3]:
        ratios = []
        for _ in range(30):
            part = random_partition(rng, 15)
            b = build_basis(part, k)
            a = rng.standard_normal(b.dim)
            for p in [1, 2]:
                ref = np.sum(np.abs(a) ** p * b.support_lengths) ** (1 / p)
                ratios.append(lp_norm(Spline(b, a), p) / ref)
        assert min(ratios) > 0.05 and max(ratios) <= 1.0 + 1e-12


def test_tensor_spline_grid_and_points(rng):
    bases = [build_basis(random_partition(rng, 4), 2), build_basis(random_partition(rng, 3), 3)]
    s = TensorSpline(bases, rng.standard_normal([b.dim for b in bases]))
    ax = [rng.uniform(0, 1, 6), rng.uniform(0, 1, 5)]
    grid = s.on_grid(ax)
    pts = np.array([[x, y] for x in ax[0] for y in ax[1]])
    assert np.allclose(grid.ravel(), s(pts), atol=1e-13)
    ref = oracles.design(bases[0].partition.edges, 2, ax[0]) @ s.coeffs @ \
        oracles.design(bases[1].partition.edges, 3, ax[1]).T
    assert np.allclose(grid, ref, atol=1e-13)
    with pytest.raises(ValueError):
        TensorSpline(bases, np.zeros((2, 2)))


def test_order_must_be_positive():
    with pytest.raises(ValueError):
        BSplineBasis(Partition1D(0.0, 1.0), 0)

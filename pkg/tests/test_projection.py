import warnings

import numpy as np
import pytest

from orthospline.bspline import BSplineBasis, TensorSpline
from orthospline.partition import Filtration1D, Partition1D, TensorFiltration, random_filtration
from orthospline.projection import (MaximalEvaluator, Projector, check_domination, kernel_decay_ratio,
                                    maximal_function, operator_norms, project, project_partial,
                                    tensor_moments)
from orthospline.regularity import dyadic_extension
from orthospline.tensor_ortho import build_system

import oracles


def random_spline(tf, k, n, rng):
    bases = [BSplineBasis(p, kk) for p, kk in zip(tf.partitions(n), k)]
    return TensorSpline(bases, rng.standard_normal([b.dim for b in bases]))


def l2_inner(s, t, tf, k, n):
    """Exact inner product of two splines living on step ``n``."""
    bases = [BSplineBasis(p, kk) for p, kk in zip(tf.partitions(n), k)]
    a = s.refine_to(bases).coeffs.ravel()
    b = t.refine_to(bases).coeffs.ravel()
    return float(a @ oracles.tensor_gram([p.edges for p in tf.partitions(n)], k) @ b)


@pytest.fixture
def setup(rng):
    tf = random_filtration(rng, 2, 14)
    return tf, (2, 3)


def test_projection_reproduces_splines(setup, rng):
    tf, k = setup
    s = random_spline(tf, k, 6, rng)
    P = project(tf, k, 6, s)
    assert np.abs(P.coeffs - s.coeffs).max() <= 1e-9 * np.abs(s.coeffs).max()


def test_order_one_is_conditional_expectation(rng):
    tf = random_filtration(rng, 2, 10)
    f = lambda p: np.exp(p[:, 0]) * np.cos(3 * p[:, 1])
    P = project(tf, (1, 1), 10, f, n_quad=12, check=False)
    for i, j in [(0, 0), (1, 2), (tf.shape(10)[0] - 1, 0)]:
        if j >= tf.shape(10)[1]:
            continue
        (a, b), (c, d) = tf.atom_box(10, (i, j))
        avg = (np.exp(b) - np.exp(a)) * (np.sin(3 * d) - np.sin(3 * c)) / 3 / ((b - a) * (d - c))
        assert P.coeffs[i, j] == pytest.approx(avg, rel=1e-10)


def test_smooth_error_order_on_dyadic():
    g = lambda p: np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])
    x, w = oracles.gauss(np.linspace(0, 1, 65), 8)
    X, Y = np.meshgrid(x, x, indexing="ij")
    exact = np.sin(np.pi * X) * np.sin(np.pi * Y)
    for k, order in [((2, 2), 2), ((3, 3), 3)]:
        errs = []
        for levels in [2, 3, 4]:
            tf = dyadic_extension([Partition1D(0.0, 1.0)] * 2, levels)
            P = project(tf, k, tf.n_steps, g, n_quad=10, check=False)
            errs.append(np.sqrt(np.sum(np.outer(w, w) * (P.on_grid([x, x]) - exact) ** 2)))
        rates = np.log2(np.array(errs[:-1]) / errs[1:])
        assert np.all(np.diff(errs) < 0)
        assert np.all(np.abs(rates - order) < 0.2)


def test_idempotent_selfadjoint_contraction_nested(setup, rng):
    tf, k = setup
    N = tf.n_steps
    f = random_spline(tf, k, N, rng)
    g = random_spline(tf, k, N, rng)
    for n in [3, 9]:
        Pf = project(tf, k, n, f)
        assert np.abs(project(tf, k, n, Pf).coeffs - Pf.coeffs).max() <= 1e-8
        lhs = l2_inner(Pf, g, tf, k, N)
        rhs = l2_inner(f, project(tf, k, n, g), tf, k, N)
        assert lhs == pytest.approx(rhs, abs=1e-8)
        assert np.sqrt(l2_inner(Pf, Pf, tf, k, N)) <= np.sqrt(l2_inner(f, f, tf, k, N)) + 1e-8
    P3, P9 = project(tf, k, 3, f), project(tf, k, 9, f)
    assert np.abs(project(tf, k, 3, P9).coeffs - P3.coeffs).max() <= 1e-8
    assert np.abs(project(tf, k, 9, P3).coeffs - P3.refine_to(P9.bases).coeffs).max() <= 1e-8


def test_kronecker_solve_matches_dense_normal_equations(rng):
    tf = random_filtration(rng, 2, 16)
    k = (3, 2)
    n = 16
    f = lambda p: np.abs(p[:, 0] - 0.4) + p[:, 1] ** 3
    edges = [p.edges for p in tf.partitions(n)]
    assert np.prod([len(e) - 1 + kk for e, kk in zip(edges, k)]) <= 400
    P = project(tf, k, n, f, n_quad=8, check=False)
    x0, w0 = oracles.gauss(edges[0], 8)
    x1, w1 = oracles.gauss(edges[1], 8)
    A = np.kron(oracles.design(edges[0], k[0], x0), oracles.design(edges[1], k[1], x1))
    X, Y = np.meshgrid(x0, x1, indexing="ij")
    vals = f(np.stack([X.ravel(), Y.ravel()], axis=1))
    W = np.kron(w0, w1)
    rhs = A.T @ (W * vals)
    c = np.linalg.solve(oracles.tensor_gram(edges, k), rhs)
    assert np.abs(P.coeffs.ravel() - c).max() <= 1e-8


def test_partial_projections(rng):
    tf = random_filtration(rng, 2, 10)
    k = (2, 2)
    system = build_system(tf, k)
    f = lambda p: np.sin(3 * p[:, 0]) * np.exp(p[:, 1])
    kw = dict(n_quad=10, check=False)
    for n in [4, 8]:
        M = system.blocks[n].size
        prev = project(tf, k, n - 1, f, **kw)
        P0 = project_partial(system, n, 0, f, n_quad=10, check=False)
        assert np.abs(P0.coeffs - prev.refine_to(P0.bases).coeffs).max() <= 1e-8
        Pfull = project_partial(system, n, M, f, n_quad=10, check=False)
        assert np.abs(Pfull.coeffs - project(tf, k, n, f, **kw).coeffs).max() <= 1e-8
        # dense oracle: normal equations on the explicit span
        m = int(rng.integers(1, M))
        ends = system.block_ends()
        R = system.coefficient_matrix(n)[:ends[n - 1] + m]
        edges = [p.edges for p in tf.partitions(n)]
        G = oracles.tensor_gram(edges, k)
        x0, w0 = oracles.gauss(edges[0], 10)
        x1, w1 = oracles.gauss(edges[1], 10)
        A = np.kron(oracles.design(edges[0], 2, x0), oracles.design(edges[1], 2, x1))
        X, Y = np.meshgrid(x0, x1, indexing="ij")
        mom = A.T @ (np.kron(w0, w1) * f(np.stack([X.ravel(), Y.ravel()], axis=1)))
        a = np.linalg.solve(R @ G @ R.T, R @ mom)
        Pm = project_partial(system, n, m, f, n_quad=10, check=False)
        assert np.abs(Pm.coeffs.ravel() - R.T @ a).max() <= 1e-8
    with pytest.raises(IndexError):
        project_partial(system, 3, system.blocks[3].size + 1, f)


def test_tensor_moments_of_spline_exact(rng):
    tf = random_filtration(rng, 2, 8)
    k = (2, 3)
    s = random_spline(tf, k, 8, rng)
    bases = [BSplineBasis(p, kk) for p, kk in zip(tf.partitions(5), k)]
    mom = tensor_moments(s, bases)
    x0, w0 = oracles.gauss(tf.partition(8, 0).edges, 6)
    x1, w1 = oracles.gauss(tf.partition(8, 1).edges, 6)
    vals = s.on_grid([x0, x1])
    ref = oracles.design(bases[0].partition.edges, 2, x0).T @ (w0[:, None] * vals * w1[None, :]) @ \
        oracles.design(bases[1].partition.edges, 3, x1)
    assert np.abs(mom - ref).max() <= 1e-12


def test_operator_norms_known_values(rng):
    tf = random_filtration(rng, 3, 12)
    assert operator_norms(tf, (1, 1, 1), 12) == pytest.approx((1.0, 1.0), abs=1e-12)
    for k in [2, 3]:
        p = Partition1D(0.0, 1.0, tuple(np.sort(rng.uniform(0, 1, 9))))
        tf1 = TensorFiltration((Filtration1D(p),))
        val = operator_norms(tf1, (k,), 0)[0]
        e = p.edges
        Ginv = np.linalg.inv(oracles.gram(e, k))
        fe = np.unique(np.concatenate([np.linspace(a, b, 60) for a, b in zip(e[:-1], e[1:])]))
        ys, wy = oracles.gauss(fe, 6)
        xs = np.concatenate([np.linspace(a, np.nextafter(b, -1), 400) for a, b in zip(e[:-1], e[1:])])
        K = oracles.design(e, k, xs) @ Ginv @ oracles.design(e, k, ys).T
        dense = np.max(np.abs(K) @ wy)
        assert val == pytest.approx(dense, rel=2e-5)


def test_linear_operator_norm_sanity_ceiling(rng):
    norms = []
    for _ in range(100):
        p = Partition1D(0.0, 1.0, tuple(np.sort(rng.uniform(0, 1, int(rng.integers(1, 40))))))
        norms.append(operator_norms(TensorFiltration((Filtration1D(p),)), (2,), 0)[0])
    print(f"max piecewise-linear projection norm {max(norms):.4f}")
    assert max(norms) <= 3


def test_maximal_function_basics(rng):
    tf = random_filtration(rng, 2, 12)
    ev = MaximalEvaluator(tf, 0.5)
    M1 = maximal_function(lambda p: np.ones(len(p)), ev)
    assert M1.min() >= 1 - 1e-12
    f = lambda p: np.exp(p[:, 0]) * (1 + np.cos(5 * p[:, 1]))
    g = lambda p: 2 * f(p) + 0.1
    Mf, Mg = ev.evaluate(f), ev.evaluate(g)
    assert np.all(Mf >= 0) and np.all(Mf <= Mg + 1e-10)
    with pytest.raises(ValueError):
        MaximalEvaluator(tf, 1.0)


def test_zero_decay_gives_martingale_maximal_function(rng):
    tf = random_filtration(rng, 2, 12)
    f = lambda p: np.exp(p[:, 0]) * (1 + np.cos(5 * p[:, 1]))
    ev = MaximalEvaluator(tf, 0.0)
    cells = ev.cell_integrals(f)
    M = ev.evaluate(cells)
    fine = tf.partitions(12)
    ref = np.zeros(cells.shape)
    for idx in np.ndindex(*cells.shape):
        mids = [p.midpoints()[i] for p, i in zip(fine, idx)]
        best = 0.0
        for n in range(13):
            A = tf.atom_of(n, mids)
            box = tf.atom_box(n, A)
            sel = tuple(slice(int(np.searchsorted(p.edges, a)), int(np.searchsorted(p.edges, b)))
                        for p, (a, b) in zip(fine, box))
            vol = np.prod([b - a for a, b in box])
            best = max(best, cells[sel].sum() / vol)
        ref[idx] = best
    assert np.allclose(M, ref, rtol=1e-12)


def test_domination_haar_case_and_homogeneity(rng):
    tf = random_filtration(rng, 2, 10)
    s1 = build_system(tf, (1, 1))
    f = lambda p: np.exp(2 * p[:, 0]) - p[:, 1]
    ev = MaximalEvaluator(tf, 0.0)
    rep = check_domination(s1, 6, 0, f, ev)
    assert rep["ratio"] <= 1 + 1e-9
    s2 = build_system(tf, (2, 2))
    ev = MaximalEvaluator(tf, 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r1 = check_domination(s2, 7, 3, f, ev)["ratio"]
        r2 = check_domination(s2, 7, 3, lambda p: 2 * f(p), ev)["ratio"]
    assert np.isfinite(r1) and r1 == pytest.approx(r2, rel=1e-10)


def test_kernel_decay_ratio_stable(rng):
    vals = []
    f = lambda p: np.abs(p[:, 0] - 0.3) * np.exp(p[:, 1])
    for n_steps in [10, 20]:
        for _ in range(3):
            tf = random_filtration(rng, 2, n_steps)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                vals.append(kernel_decay_ratio(tf, (2, 2), n_steps, f, 0.5))
    assert np.all(np.isfinite(vals))
    assert max(vals[3:]) <= 3 * max(vals[:3])


def test_projector_object(rng):
    tf = random_filtration(rng, 1, 5)
    P = Projector(tf, (2,), 5)
    s = random_spline(tf, (2,), 5, rng)
    assert np.allclose(P(s).coeffs, s.coeffs, atol=1e-10)

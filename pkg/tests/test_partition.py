import numpy as np
import pytest
from hypothesis import given, strategies as st

from orthospline.partition import (Filtration1D, InvalidSplitError, OutOfDomainError, Partition1D,
                                   TensorFiltration, atom_distance, random_filtration)

from strategies import filtrations, partitions


def test_refine_single_split():
    p = Partition1D(0.0, 1.0).refine(0, 0.5)
    assert p.n_atoms == 2
    assert p.atom(0) == (0.0, 0.5) and p.atom(1) == (0.5, 1.0)


def test_refine_left_atom_again():
    p = Partition1D(0.0, 1.0).refine(0, 0.5).refine(0, 0.25)
    assert [p.atom(i) for i in range(3)] == [(0.0, 0.25), (0.25, 0.5), (0.5, 1.0)]


@pytest.mark.parametrize("atom,x", [(0, 0.5), (1, 0.5), (0, 0.7), (1, 1.0), (2, 0.8)])
def test_refine_rejects_bad_points(atom, x):
    p = Partition1D(0.0, 1.0, (0.5,))
    with pytest.raises((InvalidSplitError, IndexError)):
        p.refine(atom, x)


def test_degenerate_partitions_rejected():
    with pytest.raises(ValueError):
        Partition1D(1.0, 1.0)
    with pytest.raises(ValueError):
        Partition1D(0.0, 1.0, (0.6, 0.4))


def test_atom_of_boundary_conventions():
    p = Partition1D(0.0, 1.0, (0.25, 0.5, 0.75))
    assert p.atom_of(0.3) == 1
    assert p.atom_of(0.25) == 1
    assert p.atom_of(0.0) == 0
    assert p.atom_of(1.0) == 3
    with pytest.raises(OutOfDomainError):
        p.atom_of(1.5)
    with pytest.raises(OutOfDomainError):
        p.atom_of(-1e-9)


def test_tensor_atom_of_against_scan():
    tf = random_filtration(np.random.default_rng(3), 2, 15)
    x = (0.3, 0.9)
    parts = tf.partitions(15)
    brute = tuple(next(i for i in range(p.n_atoms) if p.edges[i] <= xi < p.edges[i + 1])
                  for p, xi in zip(parts, x))
    assert tf.atom_of(15, x) == brute


def test_atom_distance():
    assert np.array_equal(atom_distance((2,), (5,)), [3])
    assert np.array_equal(atom_distance((1, 4), (3, 1)), [2, -3])
    assert np.array_equal(atom_distance((1, 4), (1, 4)), [0, 0])
    with pytest.raises(ValueError):
        atom_distance((0,), (1,), step_a=2, step_b=3)


@given(partitions())
def test_atom_of_midpoints(p):
    assert np.array_equal(p.atom_of(p.midpoints()), np.arange(p.n_atoms))


@given(filtrations())
def test_json_replay_is_exact(tf):
    back = TensorFiltration.from_json(tf.to_json())
    assert back == tf
    for n in range(tf.n_steps + 1):
        for a, b in zip(back.partitions(n), tf.partitions(n)):
            assert np.array_equal(a.edges, b.edges)


@given(filtrations())
def test_standard_form_counts(tf):
    for n in range(1, tf.n_steps + 1):
        prev, cur = tf.shape(n - 1), tf.shape(n)
        info = tf.step_info(n)
        diff = np.array(cur) - np.array(prev)
        assert diff[info.direction] == 1 and diff.sum() == 1
        other = int(np.prod([c for j, c in enumerate(cur) if j != info.direction]))
        assert tf.n_atoms(n) - tf.n_atoms(n - 1) == other
        for a, b in zip(tf.partitions(n), tf.partitions(n - 1)):
            assert a.is_refinement_of(b)


@given(filtrations(), st.integers(0, 12))
def test_prefix_agrees(tf, n):
    n = min(n, tf.n_steps)
    pre = tf.prefix(n)
    assert pre.n_steps == n
    for m in range(n + 1):
        assert pre.partitions(m) == tf.partitions(m)


def test_schedule_must_consume_steps():
    f = Filtration1D(Partition1D(0.0, 1.0)).append(0, 0.5)
    with pytest.raises(ValueError):
        TensorFiltration((f,), ())


def test_to_dict_format():
    tf = random_filtration(np.random.default_rng(0), 2, 4)
    d = tf.to_dict()
    assert d["format_version"] == 1 and d["dim"] == 2
    assert len(d["schedule"]) == 4
    assert set(d["schedule"][0]) == {"dir", "atom", "x"}

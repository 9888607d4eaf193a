import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distnas import space as sp

finite = st.floats(-50, 50, allow_nan=False)


def test_relax_uniform_row():
    np.testing.assert_allclose(sp.relax(np.zeros((1, 3))), [[1 / 3] * 3], rtol=1e-15)


def test_relax_closed_form_log_weights():
    got = sp.relax(np.log([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(got, [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-14)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), finite)
def test_relax_rows_sum_to_one_and_shift_invariant(logits, c):
    w = sp.relax(logits)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(sp.relax(logits + c), w, atol=1e-12)


def test_discretize_examples():
    assert sp.discretize_argmax([[0.1, 0.9, 0.0]]) == (1,)
    assert sp.discretize_argmax([[0.5, 0.5]]) == (0,)


def test_discretize_matches_relaxed_on_random_mu():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        mu = rng.standard_normal((6, 3)) * 3
        assert sp.discretize_argmax(mu) == sp.discretize_argmax(sp.relax(mu))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.integers(-20, 20).map(float)), st.lists(st.integers(-5, 5), min_size=6, max_size=6))
def test_discretize_row_shift_invariant(logits, shifts):
    # integer-valued entries keep the shift exact, so ties survive it
    shifted = logits + np.asarray(shifts, dtype=float)[:, None]
    assert sp.discretize_argmax(shifted) == sp.discretize_argmax(logits)


def test_enumerate_counts():
    s27 = sp.CellSpace(num_intermediate_nodes=2)
    assert s27.num_edges == 3 and len(list(sp.enumerate_all(s27))) == 27
    tiny = sp.CellSpace(num_intermediate_nodes=1, ops=("skip", "zero"))
    assert list(sp.enumerate_all(tiny)) == [(0,), (1,)]
    archs = list(sp.enumerate_all(sp.CellSpace()))
    assert len(archs) == 729 == len(set(archs))
    assert archs == sorted(archs)


def test_enumerate_cap():
    with pytest.raises(sp.EnumerationCapError) as exc:
        list(sp.enumerate_all(sp.CellSpace(), cap=100))
    assert exc.value.required == 729


@pytest.mark.parametrize("n,k", [(1, 2), (2, 3), (3, 3), (2, 4)])
def test_enumerate_cardinality(n, k):
    ops = ("skip", "dense_relu", "zero", "dense_tanh")[:k]
    space = sp.CellSpace(num_intermediate_nodes=n, ops=ops)
    assert sum(1 for _ in sp.enumerate_all(space)) == k ** space.num_edges


def test_op_ratio():
    space = sp.CellSpace()
    assert sp.op_ratio(space, (0,) * 6, "skip") == 1.0
    assert sp.op_ratio(space, (1,) * 6, "skip") == 0.0
    four = sp.CellSpace(num_intermediate_nodes=2, edges=((0, 1), (0, 2), (1, 2), (0, 2)))
    assert sp.op_ratio(four, (0, 1, 0, 1), "skip") == 0.5
    with pytest.raises(sp.SpaceError):
        sp.op_ratio(space, (0,) * 6, "dense_tanh")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"ops": ("skip",)},
        {"ops": ("skip", "skip", "zero")},
        {"ops": ("zero", "dense_relu", "zero")},
        {"ops": ("skip", "conv")},
        {"num_intermediate_nodes": 0},
        {"num_intermediate_nodes": 2, "edges": ((0, 1),)},
        {"num_intermediate_nodes": 2, "edges": ((0, 1), (2, 1), (0, 2))},
    ],
)
def test_invalid_spaces(kwargs):
    with pytest.raises(sp.SpaceError):
        sp.CellSpace(**kwargs)


def test_arch_id_round_trip_and_serialization():
    space = sp.CellSpace()
    for i, arch in enumerate(sp.enumerate_all(space)):
        assert sp.arch_id(space, arch) == i
        assert sp.arch_from_id(space, i) == arch
        assert sp.parse_arch(sp.format_arch(arch)) == arch
    assert sp.CellSpace.from_dict(space.to_dict()) == space
    with pytest.raises(sp.SpaceError):
        sp.validate_arch(space, (0, 0, 0, 0, 0, 3))


def test_num_archs_formula():
    space = sp.CellSpace(num_intermediate_nodes=3)
    assert space.num_archs == math.prod([space.num_ops] * space.num_edges)

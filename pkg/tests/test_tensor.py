import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpnet.tensor import Rng, check_finite, elementwise, flat_offset, he_init, unflat_offset


def test_rng_streams_are_reproducible_and_independent():
    a = Rng(7, 1, 2).normal(5)
    assert np.array_equal(a, Rng(7, 1, 2).normal(5))
    assert not np.array_equal(a, Rng(7, 1, 3).normal(5))
    assert not np.array_equal(a, Rng(8, 1, 2).normal(5))


def test_child_does_not_consume_parent_draws():
    r1, r2 = Rng(3), Rng(3)
    r1.child(5).normal(10)
    assert np.array_equal(r1.normal(4), r2.normal(4))
    assert np.array_equal(Rng(3).child(5).normal(3), Rng(3, 5).normal(3))


def test_rng_integers_are_inclusive():
    vals = Rng(0).integers(0, 2, 2000)
    assert set(vals.tolist()) == {0, 1, 2}


def test_rng_rejects_negative_seed():
    with pytest.raises(ValueError):
        Rng(-1)


def test_he_init_statistics():
    w = he_init(Rng(0), (200, 50, 3, 3), 50 * 9)
    assert w.dtype == np.float64
    assert abs(w.mean()) < 0.005
    assert w.std() == pytest.approx(np.sqrt(2 / 450), rel=0.02)


@pytest.mark.parametrize("shape,fan_in", [((3, 3), 0), ((), 4), ((0, 3), 3)])
def test_he_init_rejects_bad_arguments(shape, fan_in):
    with pytest.raises(ValueError):
        he_init(Rng(0), shape, fan_in)


def test_elementwise_ops_and_shape_check():
    a, b = np.array([1.0, -2.0, 3.0]), np.array([0.5, 4.0, -1.0])
    assert elementwise("max", a, b).tolist() == [1.0, 4.0, 3.0]
    assert elementwise("mul", a, b).tolist() == [0.5, -8.0, -3.0]
    assert elementwise("add", a, b).tolist() == [1.5, 2.0, 2.0]
    with pytest.raises(ValueError):
        elementwise("add", a, b[:2])
    with pytest.raises(ValueError):
        elementwise("pow", a, b)


@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.data())
def test_flat_offset_matches_numpy(shape, data):
    index = tuple(data.draw(st.integers(0, n - 1)) for n in shape)
    off = flat_offset(index, shape)
    assert off == np.ravel_multi_index(index, shape)
    assert unflat_offset(off, shape) == index


def test_offsets_bounds():
    with pytest.raises(IndexError):
        flat_offset((2, 0), (2, 3))
    with pytest.raises(IndexError):
        unflat_offset(6, (2, 3))


def test_check_finite():
    check_finite(np.ones(3))
    with pytest.raises(FloatingPointError):
        check_finite(np.array([1.0, np.nan]))

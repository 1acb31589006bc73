import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from actionfeat.errors import ShapeError
from actionfeat.tensor import as_shape, element_count, flatten, tensor_new


def test_zero_fill():
    t = tensor_new([2, 2, 2], 0.0)
    assert t.shape == (2, 2, 2)
    assert t.dtype == np.float32
    assert np.array_equal(t.reshape(-1), np.zeros(8))


def test_scalar_fill():
    assert tensor_new([1], 3.5).tolist() == [3.5]


def test_input_sized_tensor():
    assert tensor_new([3, 227, 227]).size == 3 * 227 * 227 == 154587
    assert element_count((3, 227, 227)) == 154587


@pytest.mark.parametrize("dims", [[0], [2, 0, 3], [-1, 4], []])
def test_bad_shapes(dims):
    with pytest.raises(ShapeError):
        tensor_new(dims)


def test_flatten_examples():
    assert flatten(np.ones((2, 2), np.float32)).tolist() == [1, 1, 1, 1]
    assert flatten(tensor_new([256, 6, 6])).shape == (9216,)
    t = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    assert np.array_equal(flatten(flatten(t)), flatten(t))


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_flatten_preserves_values(t):
    f = flatten(t)
    assert f.ndim == 1 and f.size == t.size
    assert np.array_equal(np.sort(f), np.sort(t.reshape(-1)))
    # storage order is channel-major, then row, then column
    assert np.array_equal(f, np.ravel(t, order="C"))


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.data())
def test_index_round_trip(c, h, w, data):
    t = tensor_new([c, h, w])
    idx = (data.draw(st.integers(0, c - 1)), data.draw(st.integers(0, h - 1)),
           data.draw(st.integers(0, w - 1)))
    v = data.draw(st.floats(-1e6, 1e6, width=32))
    t[idx] = v
    assert t[idx] == np.float32(v)
    assert flatten(t)[(idx[0] * h + idx[1]) * w + idx[2]] == np.float32(v)


def test_as_shape_accepts_int():
    assert as_shape(5) == (5,)

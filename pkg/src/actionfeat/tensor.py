"""Dense tensor helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float32, laid out
channel-major (c, y, x) in C order. Shapes are tuples of positive ints of
length 1 (vectors) or 3 (feature maps); the helpers here enforce that.
"""

import numpy as np

from .errors import ShapeError

DTYPE = np.float32


def as_shape(dims):
    """Validate ``dims`` and return it as a tuple of ints."""
    try:
        shape = tuple(int(d) for d in dims)
    except TypeError:
        shape = (int(dims),)
    if not shape:
        raise ShapeError("shape must have at least one dimension")
    for d in shape:
        if d < 1:
            raise ShapeError(f"dimension {d} in shape {shape} is not positive")
    return shape


def element_count(shape):
    return int(np.prod(as_shape(shape), dtype=np.int64))


def tensor_new(shape, fill=0.0):
    """Return a float32 tensor of ``shape`` with every element set to ``fill``."""
    return np.full(as_shape(shape), fill, dtype=DTYPE)


def flatten(t):
    """Rank-1 view of ``t`` in storage order."""
    return np.ascontiguousarray(t).reshape(-1)


def freeze(t):
    """Mark ``t`` read-only and return it."""
    t.flags.writeable = False
    return t


def result_dtype(*arrays):
    """float64 if any input is float64, otherwise float32."""
    for a in arrays:
        if np.asarray(a).dtype == np.float64:
            return np.float64
    return DTYPE


def format_shape(shape):
    return "x".join(str(d) for d in shape)

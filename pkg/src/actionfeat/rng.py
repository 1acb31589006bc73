"""Named, independent random streams derived from one integer seed."""

import zlib

import numpy as np


def stream(seed, name):
    """Generator for sub-stream ``name`` of ``seed``.

    Streams with different names are independent, so adding a consumer
    never perturbs the others.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])

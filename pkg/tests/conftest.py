import numpy as np
import pytest

from actionfeat import network as N

# Same 23-layer layout as the default network, shrunk to run in milliseconds.
TINY_ARCH = """\
input 3x15x15
taps 16,19,22
1 conv out=4 k=3 s=2 p=0
2 relu
3 maxpool k=3 s=2
4 lrn n=5 k=2 alpha=0.0001 beta=0.75
5 conv out=4 k=3 s=1 p=1
6 relu
7 maxpool k=2 s=1
8 lrn n=5 k=2 alpha=0.0001 beta=0.75
9 conv out=4 k=3 s=1 p=1
10 relu
11 conv out=4 k=3 s=1 p=1
12 relu
13 conv out=4 k=3 s=1 p=1
14 relu
15 maxpool k=2 s=1
16 fc out=64
17 relu
18 dropout rate=0.5
19 fc out=64
20 relu
21 dropout rate=0.5
22 fc out=2
23 softmax
"""


@pytest.fixture
def tiny_spec():
    return N.parse_arch(TINY_ARCH)


def pretrained_tiny(gain=1000.0, seed=0):
    """Tiny network whose backbone passes channel intensities through.

    Stands in for a pretrained model: each conv kernel copies one input
    channel at its centre tap, and the last conv amplifies by ``gain`` so the
    head sees features large enough to learn at a 1e-4 learning rate.
    """
    spec = N.parse_arch(TINY_ARCH)
    net = N.init_weights(spec, np.random.default_rng(seed))
    for idx in (1, 5, 9, 11, 13):
        w = net.params[idx].weights
        w[...] = 0
        o, c, k, _ = w.shape
        for j in range(o):
            w[j, j % c, k // 2, k // 2] = gain if idx == 13 else 1.0
    return net


def toy_images(seed=3):
    """Four 3x15x15 images: two bright in channel 0, two bright in channel 2."""
    rng = np.random.default_rng(seed)
    imgs = []
    for ch in (0, 0, 2, 2):
        im = np.zeros((3, 15, 15), dtype=np.float32)
        im[ch] = 10 + rng.random((15, 15), dtype=np.float32)
        imgs.append(im)
    return imgs, np.array([0, 0, 1, 1])


@pytest.fixture(scope="session")
def default_spec():
    return N.default_arch()


@pytest.fixture(scope="session")
def default_net(default_spec):
    return N.init_weights(default_spec, np.random.default_rng(0))

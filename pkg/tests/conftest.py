import math

import numpy as np
import pytest

from sosd.core import PairBatch


def unit_rows(rng, n, q):
    """Random unit vectors, rejection-free (Gaussian normalization)."""
    m = rng.standard_normal((n, q))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def random_batch(rng, n, q, labels=None):
    return PairBatch(
        anchors=unit_rows(rng, n, q),
        positives=unit_rows(rng, n, q),
        labels=np.arange(n) if labels is None else labels,
    )


def circle_points(degrees):
    """Unit vectors on S^1 at the given angles (degrees)."""
    rad = [math.radians(d) for d in degrees]
    return np.array([[math.cos(a), math.sin(a)] for a in rad])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def spec_example_batch():
    """The worked N=2 batch used across loss examples."""
    return PairBatch(
        anchors=np.array([[1.0, 0.0], [0.0, 1.0]]),
        positives=np.array([[0.6, 0.8], [-0.6, 0.8]]),
        labels=np.array([0, 1]),
    )

import numpy as np
import pytest

from fpcluster.data_model import ClusterIndex


@pytest.fixture
def rng():
    return np.random.default_rng(20240815)


def random_clusters(rng, n, n_g, n_h):
    """Random two-way cluster layout with every cluster nonempty."""
    while True:
        g = rng.integers(0, n_g, size=n)
        h = rng.integers(0, n_h, size=n)
        if (np.bincount(g, minlength=n_g).min() > 0
                and np.bincount(h, minlength=n_h).min() > 0):
            return ClusterIndex(g=g, h=h, n_clusters_g=n_g, n_clusters_h=n_h)

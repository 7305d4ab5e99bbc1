import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dsgeom.core import EmbeddingSet

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def gaussian_set(dataset_id, means, n_per_class=50, sigma=1.0, seed=0):
    """Labeled set with isotropic Gaussian classes centred on ``means`` (C x d)."""
    rng = np.random.default_rng(seed)
    means = np.atleast_2d(np.asarray(means, dtype=float))
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (means.shape[0],))
    Z = np.concatenate([m + s * rng.standard_normal((n_per_class, means.shape[1])) for m, s in zip(means, sig)])
    labels = np.repeat(np.arange(means.shape[0]), n_per_class)
    return EmbeddingSet(dataset_id, Z, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

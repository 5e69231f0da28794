import numpy as np
import pytest

from rotavg import rotmath


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)


def random_quats(rng, n):
    return rotmath.sample_uniform_rotation(rng, n)


def random_matrices(rng, n):
    return rotmath.quat_to_matrix(random_quats(rng, n))


def random_unit_vectors(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)
